import numpy as np
import pytest

import kpreid


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    summary = kpreid.generate_dataset(
        data,
        seed=7,
        identities=4,
        images_per_identity=4,
        channels=8,
        grid_width=4,
        grid_height=4,
        keypoints=2,
        image_width=32,
        image_height=32,
        patch_size=8,
        signal_strength=0.5,
    )
    return data, summary


def test_generate_dataset_writes_layout(dataset):
    data, summary = dataset
    assert (data / "manifest.json").exists()
    assert (data / "ref_keypoints.json").exists()
    assert (data / "ground_truth.json").exists()
    assert summary["images"] == 16
    assert summary["similarity_gap"] > 0


def test_feature_map_numpy_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "m.fmap"
    kpreid.write_feature_map(str(path), arr)
    back = kpreid.read_feature_map(str(path))
    np.testing.assert_array_equal(arr, back)


def test_similarity_argmax_self_match():
    rng = np.random.default_rng(1)
    ref = rng.normal(size=(8, 6, 6)).astype(np.float32)
    sim = kpreid.similarity_map(ref, 2, 3, ref)
    assert sim.shape == (6, 6)
    x, y, peak = kpreid.argmax_cell(sim)
    assert (x, y) == (2, 3)
    assert peak == pytest.approx(1.0)


def test_propagation_matches_ground_truth(dataset):
    data, _ = dataset
    import json

    result = kpreid.propagate(data, data / "ref_keypoints.json")
    truth = json.loads((data / "ground_truth.json").read_text())
    cells = {
        img["image_id"]: [(kp["x_f"], kp["y_f"]) for kp in img["keypoints"]]
        for img in truth["images"]
    }
    checked = 0
    for img in result["images"]:
        for kp, want in zip(img["keypoints"], cells[img["image_id"]]):
            assert (kp["cell_x"], kp["cell_y"]) == want
            checked += 1
    assert checked == 15 * 2  # every non-reference image, both keypoints


def test_train_eval_embed(dataset, tmp_path):
    data, _ = dataset
    cfg = kpreid.default_train_config()
    cfg["seed"] = 5
    cfg["epochs"] = 2
    cfg["batch_identities"] = 2
    cfg["images_per_identity"] = 2
    cfg["arcface_m"] = 0.1
    cfg["vit"].update(
        {
            "embed_dim": 16,
            "depth": 1,
            "heads": 2,
            "mlp_ratio": 2.0,
            "channels": 8,
            "feature_width": 4,
            "feature_height": 4,
            "n_categories": 2,
            "mode": "kpe",
        }
    )
    run = tmp_path / "run"
    result = kpreid.train(data, run, cfg, data / "ref_keypoints.json")
    assert len(result["history"]) == 2
    ckpt = run / "epoch_0002.ckpt"
    assert ckpt.exists()

    report = kpreid.evaluate(data, ckpt, cfg, data / "ref_keypoints.json")
    assert report["protocol"] == "closed-set-leave-one-out"
    assert report["tp"] + report["fn"] == len(report["per_query"])

    features = kpreid.read_feature_map(str(data / "features" / f"{report['per_query'][0]['query_id']}.fmap"))
    z = kpreid.embed(str(ckpt), kpreid._config_json(cfg), features, [(1, 1, 0)])
    assert z.shape == (16,)
    assert np.isfinite(z).all()


def test_errors_map_to_python_exceptions(tmp_path):
    with pytest.raises(IOError):
        kpreid.propagate(tmp_path / "absent", tmp_path / "absent.json")
    with pytest.raises(ValueError):
        kpreid.ablate("bogus")
