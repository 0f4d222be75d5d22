"""Builds the extension with cargo and exercises the Python API end to end.

Usage: python3 python/smoke_test.py
"""

import importlib.util
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_module(dest):
    subprocess.run(["cargo", "build", "-p", "unigen-py"], cwd=ROOT, check=True)
    built = ROOT / "target" / "debug" / "libunigen.so"
    target = dest / "unigen.so"
    shutil.copy(built, target)
    spec = importlib.util.spec_from_file_location("unigen", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        ug = build_module(tmp)

        cfg = ug.Config(n_samples=300, outer_epochs=5, outer_val_count=100,
                        select_count=120, epochs=1, seeds=[0])
        assert cfg.get("n_samples") == 300
        assert ug.Config.from_toml(cfg.to_toml()).hash() == cfg.hash()
        try:
            cfg.set("tau_scl", 0.0)
            raise AssertionError("invalid value accepted")
        except ValueError:
            pass

        soft = ug.soft_relabel([0.0, -math.log(2.0)], 0.1)
        assert abs(sum(soft) - 1.0) < 1e-12
        assert abs(ug.robust_loss([0.5, 0.5], 0, 1.0) - 0.5) < 1e-12
        assert ug.scl_loss([[1.0, 0.0], [1.0, 0.0]], [0, 0], 0.2) >= 0.0

        generated = ug.generate(cfg)
        assert len(generated) == 300 and generated.stage == "generated"
        relabeled, summary = ug.relabel(cfg, generated)
        assert summary["n_kept"] == len(relabeled)
        selected, trace = ug.weight(cfg, relabeled)
        assert len(selected) == 120 and len(trace) == 5
        assert all(w is not None and 0.0 < w < 1.0 for w in selected.weights)

        path = tmp / "selected.jsonl"
        selected.save(str(path))
        assert ug.Dataset.load(str(path)).texts == selected.texts

        ckpt, log = ug.train(cfg, selected, seed=0)
        assert set(log[0]) == {"step", "epoch", "ce", "scl", "total", "bank_size"}
        preds = ckpt.predict(["the film was brilliant", "the film was dull"])
        assert all(p in (0, 1) for p in preds)
        logits, proj = ckpt.encode(["the food was tasty"])
        assert len(logits[0]) == 2 and abs(sum(x * x for x in proj[0]) - 1.0) < 1e-9

        report = ug.evaluate(cfg, [ckpt])
        assert set(report["per_domain_accuracy"]) == {"electronics", "movie", "products", "restaurant"}

        full = ug.run_pipeline(cfg, str(tmp / "run"), skip_weight=True)
        assert 0.0 <= full["average"] <= 1.0
        print(f"smoke test passed: average accuracy {100 * full['average']:.1f}")


if __name__ == "__main__":
    sys.exit(main())
