import json
import os

import pytest

from stainforge.synthetic import generate_dataset

TOY_VIT = {"patch_size": 8, "depth": 1, "width": 32, "heads": 2, "mlp_ratio": 2.0}


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """Small synthetic paired dataset shared across pipeline tests."""
    root = tmp_path_factory.mktemp("data")
    manifest, panel, planted = generate_dataset(
        str(root), {"train": 6, "val": 3, "test": 3}, seed=1
    )
    return {"root": str(root), "manifest": manifest, "panel": panel, "planted": planted}


def write_config(path, manifest, panel, out_dir, **overrides):
    cfg = {
        "manifest": manifest,
        "panel": panel,
        "out_dir": out_dir,
        "seed": 0,
        "train": {
            "epochs": 2,
            "batch_size": 6,
            "lr": 1e-3,
            "warmup_iters": 2,
            "augment": False,
            "dropout": 0.0,
            "val_every": 1,
            "vit": dict(TOY_VIT),
        },
        "evaluate": {"bootstrap": {"n_samples": 50, "seed": 0}, "plots": False},
    }

    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = v

    merge(cfg, overrides)
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


@pytest.fixture(scope="session")
def pipeline_run(dataset, tmp_path_factory):
    """One preprocess + train + evaluate run shared by read-only tests."""
    from stainforge.pipeline import load_config, run_evaluate, run_preprocess, run_train

    out_dir = str(tmp_path_factory.mktemp("run"))
    cfg_path = write_config(
        os.path.join(out_dir, "config.json"),
        dataset["manifest"],
        dataset["panel"],
        out_dir,
    )
    cfg = load_config(cfg_path)
    pre = run_preprocess(cfg)
    tr = run_train(cfg)
    report = run_evaluate(cfg)
    return {
        "cfg": cfg,
        "cfg_path": cfg_path,
        "out_dir": out_dir,
        "preprocess": pre,
        "train": tr,
        "report": report,
        "dataset": dataset,
    }
