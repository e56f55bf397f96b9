"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from toothbench import volio
from toothbench.loss import LossConfig, elementwise_dsc, loss_gradient, weighted_dice_loss
from toothbench.metrics import assd, evaluate_case, hausdorff, surface_dice, surface_metrics, surface_overlap
from toothbench.nn import VARIANTS, ModelConfig, attention_forward, init_attention, init_model, model_forward, output_hash
from toothbench.phantom import PhantomSpec, generate_phantom, perturb_prediction
from toothbench.preprocess import ClaheParams, clahe_slice, normalize_volume, resize_axial
from toothbench.volume import Spacing, SurfacePointSet, Volume, extract_surface

from conftest import FIXTURES, label, random_blob_mask
from test_volio import minimal_nifti

SPACINGS = [(1.0, 1.0, 1.0), (0.3, 0.25, 0.25), (2.0, 0.5, 1.5), (0.5, 0.5, 1.0)]


def oracle_surface(mask, spacing):
    """Foreground voxels with a face neighbour outside the mask, by explicit padding."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    inner = m[1:-1, 1:-1, 1:-1]
    interior = inner.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(m, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(inner & ~interior) * np.asarray(spacing)


def oracle_nn(a, b, block=256):
    out = np.empty(len(a))
    for i in range(0, len(a), block):
        diff = a[i:i + block, None, :] - b[None, :, :]
        out[i:i + block] = np.sqrt((diff * diff).sum(-1).min(1))
    return out


def oracle_metrics(sr, sp, theta):
    d_rp, d_pr = oracle_nn(sr, sp), oracle_nn(sp, sr)
    return {
        "hd": max(d_rp.max(), d_pr.max()),
        "assd": (d_rp.sum() + d_pr.sum()) / (len(sr) + len(sp)),
        "so": (d_pr <= theta).mean(),
        "sd": ((d_pr <= theta).sum() + (d_rp <= theta).sum()) / (len(sr) + len(sp)),
    }


def pts(*p):
    return SurfacePointSet.from_points(p)


@pytest.mark.criterion(1, "metric-oracle equivalence (100 pairs, 1e-9 rel, < 60 s)")
def test_metric_oracle_equivalence():
    elapsed, worst = 0.0, 0.0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        spacing = SPACINGS[i % len(SPACINGS)]
        r, p = random_blob_mask(rng), random_blob_mask(rng)
        t0 = time.perf_counter()
        sr, sp = extract_surface(label(r, spacing)), extract_surface(label(p, spacing))
        got = surface_metrics(sr, sp, 1.0)
        elapsed += time.perf_counter() - t0
        ref = oracle_metrics(oracle_surface(r, spacing), oracle_surface(p, spacing), 1.0)
        for k, v in ref.items():
            g = getattr(got, "so_pred" if k == "so" else k)
            err = abs(g - v) / abs(v) if v else abs(g)
            worst = max(worst, err)
            assert err <= 1e-9, (i, k, g, v)
    print(f"criterion 1: worst relative error {worst:.3g}, accelerated time {elapsed:.2f} s")
    assert elapsed < 60


@pytest.mark.criterion(2, "perfect-prediction identities on 20 phantoms")
def test_perfect_prediction_identities():
    for seed in range(20):
        spec = PhantomSpec(dims=(12, 32, 32), spacing=Spacing(0.3, 0.25, 0.25), tooth_count=4 + seed % 6,
                           missing_teeth=seed % 2 == 1, appliance=seed % 3 == 0, seed=seed)
        _, lab = generate_phantom(spec)
        p = Volume(lab.data.astype(np.float64), lab.spacing, "probability")
        rep = evaluate_case(p, lab)
        assert (rep.dsc, rep.iou, rep.sen, rep.ppv, rep.wdsc) == (100.0,) * 5, seed
        assert (rep.hd, rep.assd) == (0.0, 0.0), seed
        assert (rep.so, rep.sd) == (100.0, 100.0), seed


@pytest.mark.criterion(3, "hand-derived surface fixtures to 12 decimals")
def test_hand_fixtures():
    assert round(hausdorff(pts((0, 0, 0)), pts((0, 3, 4))), 12) == 5.0
    assert round(assd(pts((0, 0, 0)), pts((0, 0, 1), (0, 0, 2))), 12) == round(4 / 3, 12)
    sp, sr = pts((0, 0, 0), (0, 0, 5)), pts((0, 0, 0))
    assert round(surface_overlap(sp, sr, 1.0), 12) == 0.5
    assert round(surface_dice(sr, sp, 1.0), 12) == round(2 / 3, 12)


@pytest.mark.criterion(4, "loss value, optimum and gradient vs finite differences")
def test_loss_correctness():
    p = np.array([0.5, 0.5]).reshape(2, 1, 1)
    r = np.array([1.0, 0.0]).reshape(2, 1, 1)
    assert weighted_dice_loss(p, r, LossConfig(0.5, 0.5, 0.0)).total == 0.5
    assert elementwise_dsc(p, r, 0.0) == (0.5, 0.5, 1.0)

    _, lab = generate_phantom(PhantomSpec(dims=(8, 16, 16), tooth_count=3))
    perfect = lab.data.astype(np.float64)
    assert abs(weighted_dice_loss(perfect, lab.data, LossConfig(epsilon=1e-6)).total) <= 1e-6

    worst, h = 0.0, 1e-5
    for seed in range(50):
        rng = np.random.default_rng(seed)
        r = (rng.random((4, 4, 4)) > rng.uniform(0.3, 0.8)).astype(np.float64)
        p = rng.uniform(0.02, 0.98, (4, 4, 4))
        cfg = LossConfig()
        a = loss_gradient(p, r, cfg)
        fd = np.empty_like(p)
        for i in range(p.size):
            up, dn = p.copy(), p.copy()
            up.flat[i] += h
            dn.flat[i] -= h
            fd.flat[i] = (weighted_dice_loss(up, r, cfg).total - weighted_dice_loss(dn, r, cfg).total) / (2 * h)
        rel = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-12)
        worst = max(worst, rel.max())
    print(f"criterion 4: worst gradient relative error {worst:.3g}")
    assert worst < 1e-4


@pytest.mark.criterion(5, "attention invariants, 6 variants x 25 inputs")
def test_attention_invariants():
    variants = [v for v in VARIANTS if v != "none"]
    assert len(variants) == 6
    for variant in variants:
        for seed in range(25):
            rng = np.random.default_rng(seed)
            c = int(rng.integers(2, 9))
            shape = (int(rng.integers(1, 3)), c) + tuple(int(s) for s in rng.choice([2, 4, 6], 3))
            x = rng.standard_normal(shape)
            trace = {}
            y = attention_forward(x, variant, init_attention(variant, c, rng), trace=trace)
            assert y.shape == x.shape
            assert np.isfinite(y).all()
            for name, a, axis in trace.get("softmax", []):
                assert np.abs(a.sum(axis=axis) - 1).max() <= 1e-6, name
            for name, g in trace.get("gate", []):
                assert ((g > 0) & (g < 1)).all(), name
            assert trace.get("softmax") or trace.get("gate"), variant


@pytest.mark.criterion(6, "forward determinism and golden hashes")
def test_forward_golden():
    from fixtures.regenerate import forward_input

    golden = json.loads((FIXTURES / "golden_forward.json").read_text())
    x = forward_input()
    seen = set()
    for variant in VARIANTS:
        cfg = ModelConfig(attention=variant, seed=golden["model_seed"])
        main, aux = model_forward(x, cfg, init_model(cfg))
        h = output_hash(main, aux)
        assert h == golden["forward"][variant], variant
        seen.add(h)
    assert len(seen) == len(VARIANTS)


@pytest.mark.criterion(7, "monotone degradation under dilation")
def test_monotone_degradation():
    _, lab = generate_phantom(PhantomSpec(dims=(16, 48, 48), tooth_count=6, seed=3))
    reps = [evaluate_case(perturb_prediction(lab, k, 0.0, seed=0), lab) for k in range(4)]
    assd_ = [r.assd for r in reps]
    dsc = [r.dsc for r in reps]
    assert all(a < b for a, b in zip(assd_, assd_[1:])), assd_
    assert all(a > b for a, b in zip(dsc, dsc[1:])), dsc


def _entropy(img):
    _, counts = np.unique(img, return_counts=True)
    q = counts / counts.sum()
    return float(-(q * np.log2(q)).sum())


@pytest.mark.criterion(8, "preprocessing range, entropy, normalization and identity resize")
def test_preprocessing():
    for seed in range(10):
        img, _ = generate_phantom(PhantomSpec(dims=(4, 32, 32), tooth_count=4, appliance=True,
                                              noise_sigma=0.05, seed=seed))
        for z in range(img.dims[0]):
            s = np.asarray(img.data[z], dtype=np.float64)
            out = clahe_slice(s, ClaheParams())
            assert out.min() >= s.min() and out.max() <= s.max()
        norm = normalize_volume(img)
        assert norm.data.min() == 0.0 and norm.data.max() == 1.0

    two = np.full((64, 64), 40.0)
    two[:, 32:] = 200.0
    assert _entropy(clahe_slice(two)) >= _entropy(two)

    v = Volume(np.random.default_rng(0).random((2, 256, 256)).astype(np.float32), Spacing(0.3, 0.25, 0.25))
    out = resize_axial(v, (256, 256))
    assert out.data.tobytes() == v.data.tobytes() and out.spacing == v.spacing


@pytest.mark.criterion(9, "CLI smoke chain (< 120 s, schema-valid report)")
def test_cli_chain(tmp_path):
    def run(*args):
        proc = subprocess.run([sys.executable, "-m", "toothbench", *map(str, args)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    t0 = time.perf_counter()
    run("phantom", tmp_path / "ph", "--appliance", "--missing-teeth", "--seed", 5)
    run("preprocess", tmp_path / "ph_image", tmp_path / "pre", "--clip-limit", 2.0)
    fwd = json.loads(run("forward", tmp_path / "pre", tmp_path / "net", "--attention", "cbam", "--seed", 3))
    case = tmp_path / "case.json"
    run("evaluate", tmp_path / "net_main", tmp_path / "ph_label", "--case-id", "smoke", "--out", case,
        "--threshold", 0.4, "--theta-mm", 1.5, "--w1", 0.2, "--w2", 0.8, "--attention", "cbam")
    run("report", case, "--format", "json", "--out", tmp_path / "all.json")
    elapsed = time.perf_counter() - t0
    print(f"criterion 9: chain took {elapsed:.1f} s")
    assert elapsed < 120
    assert len(fwd["hash"]) == 64

    rows = json.loads((tmp_path / "all.json").read_text())
    assert [r["case_id"] for r in rows] == ["smoke", "mean"]
    for row in rows:
        assert list(row) == list(volio.REPORT_FIELDS)
        for k in ("wdsc", "dsc", "iou", "sen", "ppv", "hd", "assd", "so", "sd"):
            v = row[k]
            assert v is None or (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0)
            if v is not None and k not in ("hd", "assd"):
                assert v <= 100
    row = rows[0]
    assert (row["threshold"], row["theta_mm"], row["w1"], row["w2"]) == (0.4, 1.5, 0.2, 0.8)
    meta = row["meta"]
    assert meta["attention"] == "cbam" and meta["hd_mode"] == "symmetric"
    assert meta["preprocess"] == "clahe>normalize" and meta["metric_path"] == "accelerated"


@pytest.mark.criterion(10, "I/O roundtrips and minimal NIfTI-1 parse")
def test_io(tmp_path):
    dtypes = list(volio.DTYPES)
    for i in range(500):
        rng = np.random.default_rng(i)
        dt = dtypes[i % len(dtypes)]
        dims = tuple(int(d) for d in rng.integers(1, 9, 3))
        if dt == "f32":
            data = rng.integers(0, 2**32, dims, dtype=np.uint32).view(np.float32)
            data = np.where(np.isfinite(data), data, np.float32(1.5))
        else:
            info = np.iinfo(volio.DTYPES[dt])
            data = rng.integers(info.min, info.max, dims, endpoint=True).astype(volio.DTYPES[dt])
        v = Volume(data, Spacing(*(float(s) for s in rng.uniform(0.05, 4, 3))))
        volio.write_volume(v, tmp_path / "r")
        back = volio.read_volume(tmp_path / "r")
        assert back.data.tobytes() == v.data.tobytes() and back.dims == v.dims and back.spacing == v.spacing

    data = np.arange(4 * 3 * 2, dtype="<i2")
    f = tmp_path / "min.nii"
    f.write_bytes(minimal_nifti((4, 3, 2), 4, 16, (0.5, 0.75, 1.25), data.tobytes()))
    nv = volio.read_nifti(f)
    assert nv.dims == (2, 3, 4)
    assert nv.spacing.as_tuple() == (1.25, 0.75, 0.5)
    assert nv.data[1, 2, 3] == 23 and nv.data[0, 0, 1] == 1
