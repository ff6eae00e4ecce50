"""Keypoint-propagated re-identification: python surface over the C++ core.

Functions that orchestrate whole steps (dataset generation, propagation,
training, evaluation, ablations) return plain dicts decoded from the core's
JSON output; array-level helpers speak numpy directly.
"""

import json as _json

from . import _kpreid as _core
from ._kpreid import (
    IoError,
    ValidationError,
    argmax_cell,
    embed,
    read_feature_map,
    similarity_map,
    write_feature_map,
)

__all__ = [
    "IoError",
    "ValidationError",
    "ablate",
    "argmax_cell",
    "default_train_config",
    "embed",
    "evaluate",
    "generate_dataset",
    "propagate",
    "read_feature_map",
    "similarity_map",
    "train",
    "write_feature_map",
]


def default_train_config():
    """Default training configuration as a dict; edit and pass back to train()."""
    return _json.loads(_core.default_train_config())


def _config_json(config):
    if config is None:
        return ""
    if isinstance(config, str):
        return config
    return _json.dumps(config)


def generate_dataset(out_dir, **kwargs):
    """Write a synthetic dataset (manifest, feature maps, reference keypoints,
    ground truth) under out_dir and return its summary."""
    return _json.loads(_core.generate_dataset(str(out_dir), **kwargs))


def propagate(data_dir, ref_keypoints_path):
    """Transfer the reference keypoints to every other image of the dataset."""
    return _json.loads(_core.propagate(str(data_dir), str(ref_keypoints_path)))


def train(data_dir, out_dir, config=None, ref_keypoints_path=""):
    """Train on the dataset's train split; config is a dict, JSON string or
    None for defaults. Returns per-epoch history and final metrics."""
    return _json.loads(
        _core.train(str(data_dir), str(out_dir), _config_json(config), str(ref_keypoints_path))
    )


def evaluate(data_dir, checkpoint_path, config=None, ref_keypoints_path=""):
    """Closed-set leave-one-out retrieval on the test split."""
    return _json.loads(
        _core.evaluate(
            str(data_dir), str(checkpoint_path), _config_json(config), str(ref_keypoints_path)
        )
    )


def ablate(protocol, config=None, **kwargs):
    """Run an ablation protocol ("modes", "keypoints" or "random")."""
    return _json.loads(_core.ablate(protocol, _config_json(config), **kwargs))
