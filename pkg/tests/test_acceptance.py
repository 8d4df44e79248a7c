"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python3 -m tests.test_acceptance``.
The desk-scale training criteria (6 and 7) train ten default-config models and
take about 35 minutes on one CPU core. They carry the ``slow`` marker, so
``-m "not slow"`` skips them; everything else finishes in about a minute.
"""

import json
import statistics
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pytest
import torch

from tests.conftest import ACCEPTANCE_LINES
from vicregl.config import TrainConfig
from vicregl.data import ShapesConfig, render_shapes
from vicregl.eval import ProbeConfig, linear_probe_classify, linear_probe_segment
from vicregl.model import build_model, load_checkpoint, save_checkpoint
from vicregl.trainer import Trainer, pretrain
from vicregl.verify import run_suite

SEEDS = range(5)
ALPHAS = (0.75, 1.0)
EVAL_SEED = 12345
EVAL_SIZE = 1000
EVAL_HOLDOUT = 0.3


def report(label: str, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {label:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, line


def suite(*names: str):
    results = [r for n in names for r in run_suite(n) if r.name == n]
    assert [r.name for r in results] == list(names)
    seconds = sum(r.seconds for r in results)
    detail = "; ".join(f"{r.name} {r.detail}" for r in results)
    return all(r.passed for r in results), seconds, detail


def test_1_gradient_suite():
    ok, seconds, detail = suite("grad_vicreg", "grad_two_view", "grad_multicrop")
    report("1", "gradient suite", ok and seconds < 60, f"{detail}; {seconds:.1f}s (limit 60s)")


def test_2_matching_oracles():
    ok, seconds, detail = suite("match_location", "match_feature", "match_top_gamma")
    report("2", "matching oracles", ok and seconds < 60, f"{detail}; {seconds:.1f}s (limit 60s)")


def test_3_closed_form_values():
    ok, _, detail = suite("loss_values", "alpha_one")
    report("3", "closed-form loss values", ok, detail)


def test_4_degenerate_multicrop():
    ok, _, detail = suite("degenerate_multicrop")
    report("4", "multi-crop reduces to two-view", ok, detail)


def test_5_geometry():
    ok, _, detail = suite("geometry")
    report("5", "geometry properties", ok, detail + "; 224/7 grid centers (k+0.5)*32")


# -- desk-scale training -------------------------------------------------------

@dataclass
class DeskRun:
    first_total: float
    last_total: float
    last_std_min: float
    min_std_after_warmup: float
    steps: int
    train_seconds: float
    cls: float
    seg: float
    probe_seconds: float


@dataclass
class DeskRuns:
    runs: Dict[float, List[DeskRun]] = field(default_factory=dict)
    random_cls: List[float] = field(default_factory=list)


def default_dataset(cfg: TrainConfig):
    return render_shapes(ShapesConfig(canvas_size=cfg.data.canvas_size, seed=cfg.data.seed),
                         cfg.data.n_samples)


def eval_split():
    return render_shapes(ShapesConfig(seed=EVAL_SEED), EVAL_SIZE).split(EVAL_HOLDOUT)


@pytest.fixture(scope="module")
def desk():
    """Default-config pretraining for five seeds at each alpha, followed by frozen probes."""
    train_eval, test_eval = eval_split()
    out = DeskRuns()
    for alpha in ALPHAS:
        out.runs[alpha] = []
        for seed in SEEDS:
            cfg = TrainConfig()
            cfg.loss.alpha, cfg.seed = alpha, seed
            t = time.perf_counter()
            trainer = Trainer(cfg, default_dataset(cfg))
            trainer.fit()
            train_seconds = time.perf_counter() - t
            h = trainer.history
            t = time.perf_counter()
            cls = linear_probe_classify(trainer.model, train_eval, ProbeConfig(), test=test_eval).value
            seg = linear_probe_segment(trainer.model, train_eval, ProbeConfig(), test=test_eval).value
            out.runs[alpha].append(DeskRun(
                h[0]["total"], h[-1]["total"], h[-1]["std_min"],
                min(r["std_min"] for r in h[trainer.warmup_steps:]), len(h),
                train_seconds, cls, seg, time.perf_counter() - t))
            print(f"alpha={alpha} seed={seed}: {len(h)} steps in {train_seconds:.0f}s, "
                  f"loss {h[0]['total']:.2f} -> {h[-1]['total']:.2f}, std_min {h[-1]['std_min']:.3f}, "
                  f"cls {cls:.4f}, seg {seg:.4f}", flush=True)
    cfg = TrainConfig()
    for seed in SEEDS:
        model = build_model(cfg.encoder, cfg.heads, seed=seed)
        out.random_cls.append(linear_probe_classify(model, train_eval, ProbeConfig(), test=test_eval).value)
    return out


def _fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3f}" for v in values) + "]"


@pytest.mark.slow
def test_6_no_collapse(desk):
    runs = desk.runs[0.75]
    std = statistics.median(r.last_std_min for r in runs)
    drop = statistics.median(r.last_total - r.first_total for r in runs)
    seconds = sum(r.train_seconds for r in runs)
    ok = std > 0.1 and drop < 0 and seconds < 15 * 60
    report("6", "desk training without collapse", ok,
           f"median final std_min {std:.3f} (> 0.1), median final-minus-step-1 loss {drop:.2f} (< 0), "
           f"worst std_min after warmup {min(r.min_std_after_warmup for r in runs):.3f}, "
           f"{runs[0].steps} steps/run, 5 runs in {seconds / 60:.1f} min (limit 15)")


@pytest.mark.slow
def test_7_alpha_direction(desk):
    local, glob = desk.runs[0.75], desk.runs[1.0]
    seg_l, seg_g = (statistics.median(r.seg for r in rs) for rs in (local, glob))
    cls_l, cls_g = (statistics.median(r.cls for r in rs) for rs in (local, glob))
    seconds = sum(r.train_seconds + r.probe_seconds for rs in (local, glob) for r in rs)
    ok = seg_l > seg_g and abs(cls_l - cls_g) <= 0.05 and seconds < 3600
    report("7", "alpha=0.75 vs alpha=1.0", ok,
           f"median mIoU {seg_l:.4f} vs {seg_g:.4f}, median cls {cls_l:.4f} vs {cls_g:.4f} "
           f"(|diff| {abs(cls_l - cls_g):.4f} <= 0.05), {seconds / 60:.1f} min (limit 60); "
           f"per-seed mIoU {_fmt(r.seg for r in local)} vs {_fmt(r.seg for r in glob)}")


@pytest.mark.slow
def test_pretrained_beats_random(desk):
    pre = statistics.median(r.cls for r in desk.runs[0.75])
    rnd = statistics.median(desk.random_cls)
    report("B", "pretrained vs random-init cls", pre >= rnd + 0.10,
           f"median cls {pre:.4f} vs random {rnd:.4f}, gain {100 * (pre - rnd):.1f} points (>= 10); "
           f"per-seed {_fmt(r.cls for r in desk.runs[0.75])} vs {_fmt(desk.random_cls)}")


# -- plumbing -----------------------------------------------------------------

def short_config(**loss) -> TrainConfig:
    cfg = TrainConfig(epochs=2)
    cfg.data.n_samples = 128
    cfg.optim.warmup_epochs = 1
    cfg.multicrop.enabled = True
    for k, v in loss.items():
        setattr(cfg.loss, k, v)
    return cfg


ABLATIONS = {
    "no L_s": ({"use_location": False}, ["local_location"]),
    "no L_d": ({"use_feature": False}, ["local_feature"]),
    "no V": ({"use_variance": False}, ["variance"]),
    "no C": ({"use_covariance": False}, ["covariance"]),
    "no multi-crop": ({}, []),
}


def test_8_ablation_plumbing(tmp_path):
    problems, done = [], []
    for name, (loss, zeroed) in ABLATIONS.items():
        cfg = short_config(**loss)
        if name == "no multi-crop":
            cfg.multicrop.enabled = False
        run = tmp_path / name.replace(" ", "_")
        trainer = Trainer(cfg, default_dataset(cfg), run)
        trainer.fit()
        n_views = len(trainer.views_at(0).pixels)
        records = [json.loads(ln) for ln in (run / "metrics.jsonl").read_text().splitlines()]
        for r in records:
            weights = {k[len("weight_"):]: v for k, v in r.items() if k.startswith("weight_")}
            for term, weight in weights.items():
                if (weight == 0.0) != (term in zeroed):
                    problems.append(f"{name}: {term} weight {weight}")
            for term in zeroed:
                if term.startswith("local_") and r[term] != 0.0:
                    problems.append(f"{name}: disabled {term} logged {r[term]}")
            rebuilt = sum(w * r[t] for t, w in weights.items())
            if not np.isclose(rebuilt, r["total"], rtol=1e-5, atol=1e-6):
                problems.append(f"{name}: weighted terms {rebuilt} != total {r['total']}")
        expect_views = 2 if name == "no multi-crop" else 2 + cfg.multicrop.n_small
        if n_views != expect_views:
            problems.append(f"{name}: {n_views} views, expected {expect_views}")
        done.append(f"{name} ({len(records)} steps, {n_views} views)")
    report("8", "ablation plumbing", not problems,
           "; ".join(problems) if problems else "zero weights logged for " + ", ".join(done))


def test_9_reproducible_runs(tmp_path):
    cfg = short_config()
    cfg.multicrop.enabled = False
    cfg.checkpoint_every = 1
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        pretrain(cfg, default_dataset(cfg), d)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    other = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
    differing = [str(f) for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".vrgl" for f in files)
    report("9", "byte-identical reruns", files == other and not differing,
           f"{len(files)} files compared ({n_ckpt} checkpoints, metrics log, config); differing: {differing or 'none'}")


def test_10_checkpoint_round_trip(tmp_path):
    cfg = short_config()
    cfg.multicrop.enabled = False
    ckpt, _ = pretrain(cfg, default_dataset(cfg))
    path = tmp_path / "model.vrgl"
    save_checkpoint(ckpt, path)
    original = build_model(cfg.encoder, cfg.heads, seed=cfg.seed)
    ckpt.load_into(original)
    restored = build_model(cfg.encoder, cfg.heads, seed=cfg.seed + 1)
    load_checkpoint(path).load_into(restored)
    original.eval()
    restored.eval()
    x = torch.from_numpy(np.random.default_rng(0).random((100, 3, 64, 64), dtype=np.float32))
    mismatched = 0
    with torch.no_grad():
        for i in range(len(x)):
            a, b = original(x[i:i + 1]), restored(x[i:i + 1])
            mismatched += not all(torch.equal(u, v) for u, v in zip(a, b))
    report("10", "checkpoint round-trip", mismatched == 0,
           f"{100 - mismatched}/100 inputs bit-identical after save and load")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q", "-p", "no:cacheprovider"]))
