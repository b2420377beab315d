"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary ends
with one PASS/FAIL line per criterion.
"""

import math
import struct
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image, ImageFilter
from scipy.stats import ortho_group

from sprout import checkpoint as ck
from sprout import sprf
from sprout.curation import CurationManifest, run_pipeline
from sprout.diffusion import (
    PARAM_MODES,
    SCHEDULE_KINDS,
    Parameterization,
    forward_diffuse,
    make_schedule,
    recover_x0,
    regression_target,
)
from sprout.erank import collect_features, effective_rank, select_timestep
from sprout.errors import FormatError, SingularityError
from sprout.model import build_model, forward, param_count
from sprout.probe import SegSample, compute_miou, fit_probe, pca_visualize, predict_logits
from sprout.synthetic import two_texture_corpus, two_texture_image
from sprout.trainer import TrainConfig, Trainer, estimate_steps, train_loop, train_step


def criterion(number, title):
    def wrap(fn):
        fn._criterion = (number, title)
        return fn

    return wrap


@pytest.fixture(autouse=True)
def _tag(request, record_property):
    tag = getattr(request.function, "_criterion", None)
    if tag is not None:
        record_property("criterion", tag)


# -- 1 -------------------------------------------------------------------------


@criterion(1, "diffusion algebra round trips")
def test_diffusion_algebra_suite(record_property):
    start = time.perf_counter()
    grid = torch.linspace(0, 1, 101, dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.rand(101, 3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(101, 3, 8, 8, generator=gen, dtype=torch.float64)
    worst, singular = 0.0, 0
    for kind in SCHEDULE_KINDS:
        s = make_schedule(kind)
        for mode in PARAM_MODES:
            p = Parameterization(mode)
            nb = forward_diffuse(x0, eps, grid, s)
            ref_xt = s.a(grid).view(-1, 1, 1, 1) * x0 + s.b(grid).view(-1, 1, 1, 1) * eps
            worst = max(worst, float((nb.xt - ref_xt).abs().max()))
            target = regression_target(x0, eps, grid, p)
            worst = max(worst, float((target - (p.c() * x0 + p.d() * eps)).abs().max()))
            for i, t in enumerate(grid.tolist()):
                tt = grid[i : i + 1]
                try:
                    back = recover_x0(nb.xt[i : i + 1], target[i : i + 1], tt, s, p)
                except SingularityError:
                    # only the noise target at a vanishing signal coefficient is singular
                    assert mode == "epsilon" and s.a(t) < 1e-3
                    singular += 1
                    continue
                worst = max(worst, float((back - x0[i : i + 1]).abs().max()))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max error {worst:.2e}, {singular} singular endpoints, {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 10


# -- 2 -------------------------------------------------------------------------


@criterion(2, "effective-rank suite")
def test_effective_rank_suite(record_property):
    start = time.perf_counter()
    assert effective_rank(np.eye(4)) == 4.0
    assert effective_rank(np.outer([1.0, -2.0, 3.0], [0.5, 0.25, 4.0, 1.0])) == 1.0
    assert abs(effective_rank(np.diag([3.0, 1.0])) - 1.75477) <= 1e-4

    rng = np.random.default_rng(0)
    worst_inv = 0.0
    for _ in range(20):
        n, d = rng.integers(2, 24, size=2)
        m = rng.standard_normal((n, d))
        base = effective_rank(m)
        worst_inv = max(worst_inv, abs(effective_rank(m * 10 ** rng.uniform(-3, 3)) - base))
        q = ortho_group.rvs(int(d), random_state=rng)
        worst_inv = max(worst_inv, abs(effective_rank(m @ q) - base))
    assert worst_inv <= 1e-6

    for _ in range(1000):
        n, d = rng.integers(2, 20, size=2)
        r = rng.integers(1, min(n, d) + 1)
        m = rng.standard_normal((n, r)) @ rng.standard_normal((r, d))
        e = effective_rank(m)
        assert 1.0 - 1e-12 <= e <= min(n, d) + 1e-12
    elapsed = time.perf_counter() - start
    record_property("detail", f"invariance error {worst_inv:.1e}, {elapsed:.1f} s")
    assert elapsed < 30


# -- 3 -------------------------------------------------------------------------


class FullRankAtHalf:
    """Features are full-rank Gaussian rows at t=0.5 and rank-1 elsewhere."""

    def __init__(self, dim=8):
        self.dim = dim
        self.direction = torch.linspace(1.0, 2.0, dim, dtype=torch.float64)

    def extract_features(self, xt, t, layer=None):
        seed = int(abs(float(xt.sum())) * 1000) % (2**31)
        gen = torch.Generator().manual_seed(seed)
        if float(t[0]) == 0.5:
            return torch.randn(xt.shape[0], 2, 2, self.dim, generator=gen, dtype=torch.float64)
        return (torch.rand(xt.shape[0], 2, 2, 1, generator=gen, dtype=torch.float64) + 0.5) * self.direction


def lapack_erank(matrix):
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    s = s[s > 1e-10 * s[0]]
    p = s / s.sum()
    return math.exp(-float((p * np.log(p)).sum()))


@criterion(3, "timestep selection oracle")
def test_timestep_selection_oracle(record_property):
    start = time.perf_counter()
    stub = FullRankAtHalf()
    images = torch.rand(32, 3, 8, 8, generator=torch.Generator().manual_seed(0)) * 2 - 1
    grid = [round(0.1 * i, 10) for i in range(11)]
    report = select_timestep(stub, images, grid, pooling="token")
    assert report.t_star == 0.5
    worst = 0.0
    for t, e in zip(report.grid, report.eranks):
        worst = max(worst, abs(e - lapack_erank(collect_features(stub, images, t, pooling="token").data)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"t_star {report.t_star}, oracle error {worst:.1e}")
    assert worst <= 1e-6
    assert elapsed < 60


# -- 4 -------------------------------------------------------------------------


@criterion(4, "double-precision gradient check")
def test_gradient_check(record_property):
    start = time.perf_counter()
    model = build_model("udit-nano", seed=0).double()
    assert param_count(model) < 1_000_000
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # move off the zero-initialized gates so every parameter carries gradient
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
    x = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    target = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)

    def loss_fn():
        return ((model(x, t) - target) ** 2).mean()

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    names = list(params)
    coords = set()
    k = 0
    while len(coords) < max(100, len(names)):
        name = names[k % len(names)]
        coords.add((name, int(torch.randint(0, params[name].numel(), (1,), generator=gen))))
        k += 1
    h, worst = 1e-6, 0.0
    with torch.no_grad():
        for name, idx in sorted(coords):
            flat = params[name].view(-1)
            analytic = float(params[name].grad.view(-1)[idx])
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(coords)} coordinates, worst relative error {worst:.1e}, {elapsed:.0f} s")
    assert len(coords) >= 100
    assert worst < 1e-3
    assert elapsed < 300


# -- 5 -------------------------------------------------------------------------


@criterion(5, "zero-init head and unit first-step loss")
def test_zero_init_head(record_property):
    model = build_model("udit-nano", seed=0)
    x = torch.rand(16, 3, 32, 32, generator=torch.Generator().manual_seed(0)) * 2 - 1
    out = forward(model, x, torch.rand(16, generator=torch.Generator().manual_seed(1)))
    assert torch.count_nonzero(out) == 0
    trainer = Trainer(model, TrainConfig(batch_size=16, parameterization="epsilon"))
    loss = train_step(trainer, x).loss
    record_property("detail", f"first-step loss {loss:.4f}")
    assert abs(loss - 1.0) <= 0.1


# -- 6 -------------------------------------------------------------------------

PRETRAIN_STEPS = 2000
CORPUS_SIZE = 2000
IMAGE_SIZE = 64
# x0 targets give texture-aware features within the 2000-step budget; the
# library default stays epsilon, which needs far longer training to get there
PRETRAIN = dict(batch_size=16, lr=1e-3, parameterization="x0")
PROBE_T = 0.25
PROBE_EPOCHS = 100
PROBE_LR = 1e-2


def _probe_miou(model, train, val):
    head = fit_probe(model, train, 2, t=PROBE_T, epochs=PROBE_EPOCHS, lr=PROBE_LR)
    with torch.no_grad():
        preds = [predict_logits(model, head, s.image, t=PROBE_T).argmax(0).numpy() for s in val]
    return compute_miou(preds, [s.label for s in val], 2).miou


@pytest.mark.slow
@criterion(6, "toy pre-training beats random init by 10 mIoU points")
def test_pretraining_benefit(tmp_path, record_property):
    start = time.perf_counter()
    images, _ = two_texture_corpus(CORPUS_SIZE, IMAGE_SIZE, seed=1)
    data = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 127.5 - 1
    cfg = TrainConfig(steps=PRETRAIN_STEPS, checkpoint_interval=PRETRAIN_STEPS, image_size=IMAGE_SIZE, **PRETRAIN)
    train_loop(data, cfg, tmp_path / "pre.spck")
    pretrained = ck.load_model(tmp_path / "pre.spck")
    random_init = build_model(cfg.model_config(), seed=cfg.seed)

    probe_images, probe_labels = two_texture_corpus(100, IMAGE_SIZE, seed=2)
    samples = [SegSample(img, lab) for img, lab in zip(probe_images, probe_labels)]
    train, val = samples[:50], samples[50:]
    ours = _probe_miou(pretrained, train, val)
    baseline = _probe_miou(random_init, train, val)
    elapsed = time.perf_counter() - start
    gap = 100 * (ours - baseline)
    record_property("detail", f"pretrained {ours:.3f} vs random {baseline:.3f}, gap {gap:.1f} points, {elapsed / 60:.1f} min")
    assert elapsed < 3600
    assert gap >= 10.0


# -- 7 -------------------------------------------------------------------------


@criterion(7, "square-root step scaling")
def test_scaling_estimator(record_property):
    rng = np.random.default_rng(7)
    for n, s in rng.integers(1, 10**7, size=(100, 2)).tolist():
        assert estimate_steps(n, s, 4 * n) == 2 * s
    # a four-fold increase in dataset size doubles the step budget
    assert estimate_steps(1000, 100, 4000) == 200
    record_property("detail", "100 random (n, s) pairs")


# -- 8 -------------------------------------------------------------------------


def planted_corpus(root: Path):
    """22 distinct originals plus 8 planted defects; returns the expected removals."""
    rng = np.random.default_rng(0)
    images = {f"img{i:02d}.png": two_texture_image(rng, 64)[0] for i in range(22)}
    expected = {}
    for k, src in enumerate(["img03.png", "img07.png", "img11.png"]):
        images[f"zdup{k}.png"] = images[src].copy()
        expected[f"zdup{k}.png"] = ("feature", "near-duplicate", src)
    for k, src in enumerate(["img05.png", "img15.png"]):
        images[f"zblur{k}.png"] = np.asarray(Image.fromarray(images[src]).filter(ImageFilter.GaussianBlur(3)))
        expected[f"zblur{k}.png"] = ("quality", "blurred", None)
    for k in range(2):
        images[f"zblack{k}.png"] = np.zeros((64, 64, 3), np.uint8)
        expected[f"zblack{k}.png"] = ("quality", "underexposed", None)
    images["zconst.png"] = np.full((64, 64, 3), (90, 140, 60), np.uint8)
    expected["zconst.png"] = ("feature", "low-semantic-content", None)
    root.mkdir(parents=True, exist_ok=True)
    for name, rgb in images.items():
        Image.fromarray(rgb).save(root / name)
    return expected


@criterion(8, "curation pipeline on a planted corpus")
def test_curation_planted_corpus(tmp_path, record_property):
    start = time.perf_counter()
    expected = planted_corpus(tmp_path / "corpus")
    manifest = run_pipeline(tmp_path / "corpus")
    assert len(manifest.verdicts) == 30
    removed = {v.image_id: (v.stage, v.reason, v.duplicate_of) for v in manifest.verdicts if v.decision == "removed"}
    assert removed == expected
    assert manifest.count("kept") + manifest.count("removed") + manifest.count("errored") == 30
    assert manifest.count("errored") == 0
    first = manifest.to_text().encode()
    second = run_pipeline(tmp_path / "corpus").to_text().encode()
    assert first == second
    assert CurationManifest.from_text(first.decode()).to_text().encode() == first
    elapsed = time.perf_counter() - start
    record_property("detail", f"kept {manifest.count('kept')}, removed {len(removed)}, {elapsed:.1f} s")
    assert elapsed < 60


# -- 9 -------------------------------------------------------------------------


@criterion(9, "checkpoint and feature file persistence")
def test_persistence(tmp_path, record_property):
    model = build_model("udit-nano", seed=3)
    path = tmp_path / "m.spck"
    ck.save_checkpoint(model, path, step=11)
    raw = path.read_bytes()
    loaded = ck.load_model(path)
    ref = model.state_dict()
    assert all(torch.equal(v, ref[k]) for k, v in loaded.state_dict().items())
    ck.save_checkpoint(loaded, tmp_path / "again.spck", step=11)
    assert (tmp_path / "again.spck").read_bytes() == raw
    assert ck.encode(ck.decode(raw)) == raw

    feats = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    sprf.write_features(tmp_path / "f.sprf", feats)
    fraw = (tmp_path / "f.sprf").read_bytes()
    assert np.array_equal(sprf.read_features(tmp_path / "f.sprf"), feats)
    assert sprf.encode(sprf.decode(fraw)) == fraw

    for blob, decode in ((raw, ck.decode), (fraw, sprf.decode)):
        with pytest.raises(FormatError):
            decode(b"XXXX" + blob[4:])
        for cut in (2, 10, len(blob) // 2, len(blob) - 1):
            with pytest.raises(FormatError):
                decode(blob[:cut])
    with pytest.raises(FormatError):
        sprf.decode(fraw[:4] + struct.pack("<I", 2) + fraw[8:])
    record_property("detail", f"checkpoint {len(raw)} bytes, feature file {len(fraw)} bytes")


# -- 10 ------------------------------------------------------------------------


@criterion(10, "PCA visualization against an eigen oracle")
def test_pca_visualization(record_property):
    rng = np.random.default_rng(8)
    h, w, d = 12, 10, 16
    basis, _ = np.linalg.qr(rng.standard_normal((d, 3)))
    coeffs = rng.standard_normal((h * w, 3)) * np.array([5.0, 2.0, 0.7])
    feats = (coeffs @ basis.T + rng.standard_normal(d)).reshape(h, w, d)
    out = pca_visualize(feats)
    x = feats.reshape(-1, d)
    x = x - x.mean(axis=0)
    evals, evecs = np.linalg.eigh(x.T @ x / x.shape[0])
    top = evecs[:, np.argsort(evals)[::-1][:3]].T
    corr = []
    for i in range(3):
        if top[i, np.argmax(np.abs(top[i]))] < 0:
            top[i] = -top[i]
        corr.append(np.corrcoef(x @ top[i], out.rgb.reshape(-1, 3)[:, i].astype(np.float64))[0, 1])
    record_property("detail", f"min channel correlation {min(corr):.5f}")
    assert min(corr) > 0.999
    flat = pca_visualize(np.full((4, 5, 7), -2.5))
    assert flat.degenerate and (flat.rgb == 128).all()


# -- 11 ------------------------------------------------------------------------


@criterion(11, "mIoU scorer")
def test_miou_scorer(record_property):
    res = compute_miou(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]]), 2)
    assert res.per_class == [1 / 3, 1 / 3]
    label = np.array([[0, 1], [1, 0]])
    assert compute_miou(label, label, 2).miou == 1.0
    assert compute_miou(label, 1 - label, 2).miou == 0.0
    record_property("detail", "1/3, 1.0, 0.0")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
