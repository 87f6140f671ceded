"""Acceptance suite: each numbered criterion is one test, reported as a PASS/FAIL line at the end of the run."""

import json
import math
import struct
import time

import numpy as np
import pytest

from fmrifuse import tensor as tn
from fmrifuse.checks import desk_gradcheck
from fmrifuse.cli import main
from fmrifuse.dicom import parse_dicom, write_dicom
from fmrifuse.errors import FormatError, UnsupportedTransferSyntaxError
from fmrifuse.fmri import PatchSpec, Volume4D, extract_patches, load_volume
from fmrifuse.metadata import default_schema
from fmrifuse.model import (
    ModelConfig,
    cross_attention_layer,
    embed_fmri,
    forward,
    init_params,
    positional_encoding,
)
from fmrifuse.synth import SynthConfig, class_regions, load_manifest, synth_dataset
from fmrifuse.tensor import Tensor
from fmrifuse.training import (
    OptimState,
    TrainConfig,
    adamw_step,
    cross_entropy,
    evaluate,
    mmd_domain_loss,
    total_loss,
    train_loop,
)

from conftest import reassemble_patches
from dicom_helpers import LONG, random_values, top_level_elements

SCHEMA = default_schema()


def _zero(params, name):
    out = dict(params)
    out[name] = Tensor(np.zeros(params[name].shape))
    return out


@pytest.mark.criterion(1, "full composite-loss gradient check, d=8 N=8 K=3 C=2, max_rel_err < 1e-5 in < 60 s")
def test_gradient_fidelity(record_property):
    start = time.perf_counter()
    report = desk_gradcheck(seed=0, eps=1e-5, lam=0.1)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max_rel_err={report.max_rel_err:.2e} over {report.n_checked} params, {elapsed:.1f}s")
    assert report.max_rel_err < 1e-5
    assert elapsed < 60


@pytest.mark.criterion(2, "attention rows sum to 1 +/- 1e-9 over 1000 random forward passes")
def test_attention_normalization(record_property):
    r = np.random.default_rng(2)
    worst, rows = 0.0, 0
    for trial in range(1000):
        heads = int(r.choice([1, 2, 4]))
        cfg = ModelConfig(d=4 * heads, heads=heads, L_self=int(r.integers(1, 3)), L_cross=int(r.integers(1, 3)),
                          dropout_rate=0.0, C=int(r.integers(2, 5)), p=int(r.integers(1, 9)),
                          f=int(r.integers(1, 9)), K=int(r.integers(1, 6)), N=int(r.integers(1, 9)))
        params = init_params(cfg, r)
        scale = 10.0 ** r.uniform(-2, 2)
        out = forward(params, cfg, r.normal(size=(cfg.N, cfg.p)) * scale, r.normal(size=(cfg.K, cfg.f)) * scale)
        for w in out.attention.all_weights():
            err = np.abs(w.sum(axis=-1) - 1.0)
            worst = max(worst, float(err.max()))
            rows += err.size
    record_property("detail", f"{rows} rows, worst deviation {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(3, "identities: W_e=0 gives PE, single key weight 1, W_out=0 gives 1/C, lambda=0 gives L_CE")
def test_identities():
    r = np.random.default_rng(3)
    cfg = ModelConfig(d=8, heads=2, L_self=2, L_cross=1, dropout_rate=0.0, C=3, p=6, f=5, K=1, N=5)
    params = init_params(cfg, r)
    fmri, meta = r.normal(size=(cfg.N, cfg.p)), r.normal(size=(cfg.K, cfg.f))

    np.testing.assert_array_equal(embed_fmri(fmri, _zero(params, "W_e")).data, positional_encoding(cfg.N, cfg.d))

    out = forward(params, cfg, fmri, meta)
    assert out.attention.cross_layers[0].shape[-1] == 1
    assert np.all(out.attention.cross_layers[0] == 1.0)

    uniform = forward(_zero(params, "W_out"), cfg, fmri, meta).probs.data
    assert np.all(uniform == 1.0 / 3.0)

    batch_f, batch_m = r.normal(size=(4, cfg.N, cfg.p)), r.normal(size=(4, cfg.K, cfg.f))
    out = forward(params, cfg, batch_f, batch_m)
    ce = cross_entropy(out.probs, [0, 1, 2, 0])
    da, degenerate = mmd_domain_loss(out.fused, ["a", "a", "b", "b"])
    assert not degenerate and da.item() > 0
    assert total_loss(ce, da, 0.0).data.tobytes() == ce.data.tobytes()


@pytest.mark.criterion(4, "cross-attention output bitwise invariant to metadata order, 100 trials")
def test_permutation_invariance():
    r = np.random.default_rng(4)
    cfg = ModelConfig(d=16, heads=4, L_self=1, L_cross=1, dropout_rate=0.0, C=2, p=8, f=25, K=7, N=12)
    for trial in range(100):
        params = init_params(cfg, r)
        layer = {k[len("cross0."):]: v for k, v in params.items() if k.startswith("cross0.")}
        z_f = Tensor(r.normal(size=(cfg.N, cfg.d)))
        z_m = Tensor(r.normal(size=(cfg.K, cfg.d)) * r.uniform(0.1, 10))
        perm = r.permutation(cfg.K)
        a, _ = cross_attention_layer(z_f, z_m, layer, cfg.heads)
        b, _ = cross_attention_layer(z_f, Tensor(z_m.data[perm]), layer, cfg.heads)
        assert a.data.tobytes() == b.data.tobytes(), f"trial {trial}"


@pytest.mark.criterion(5, "patch extraction inverts exactly on 50 random volumes, N*p == T*H*W*D")
def test_patch_round_trip():
    r = np.random.default_rng(5)
    for _ in range(50):
        patch = tuple(int(x) for x in r.integers(1, 5, size=4))
        shape = tuple(p * int(b) for p, b in zip(patch, r.integers(1, 4, size=4)))
        volume = Volume4D(r.normal(size=shape))
        tokens = extract_patches(volume, PatchSpec(*patch))
        assert tokens.count * tokens.width == math.prod(shape)
        np.testing.assert_array_equal(reassemble_patches(tokens.values, shape, patch), volume.data)


def _corrupt(raw, r):
    """One structural corruption of a valid file; returns (kind, bytes)."""
    elements = top_level_elements(raw)
    body = [e for e in elements if e[2][0] != 0x0002]
    kind = r.choice(["truncate", "vr", "length", "magic", "order", "reserved"])
    buf = bytearray(raw)
    if kind == "truncate":
        boundaries = {end for _, end, _, _ in elements}
        cuts = [c for c in range(len(raw)) if c not in boundaries]
        return kind, raw[:int(r.choice(cuts))]
    if kind == "vr":
        start = elements[int(r.integers(len(elements)))][0]
        buf[start + 4:start + 6] = b"Q" + bytes([int(r.integers(ord("0"), ord("9") + 1))])
    elif kind == "length":
        start, _, _, vr = elements[int(r.integers(len(elements)))]
        if vr in LONG:
            buf[start + 8:start + 12] = struct.pack("<I", len(raw) + int(r.integers(1, 1 << 20)))
        else:
            buf[start + 6:start + 8] = struct.pack("<H", 0xFFFF - int(r.integers(0, 16)))
    elif kind == "magic":
        buf[128 + int(r.integers(4))] ^= int(r.integers(1, 256))
    elif kind == "order":
        i = int(r.integers(len(body) - 1))
        a, b = body[i], body[i + 1]
        return kind, raw[:a[0]] + raw[b[0]:b[1]] + raw[a[0]:a[1]] + raw[b[1]:]
    else:
        long_elems = [e for e in elements if e[3] in LONG]
        start = long_elems[int(r.integers(len(long_elems)))][0]
        buf[start + 6 + int(r.integers(2))] = int(r.integers(1, 256))
    return kind, bytes(buf)


@pytest.mark.criterion(6, "DICOM: 200 fuzz round-trips exact, 200 corruptions all raise, foreign syntax rejected by UID")
def test_dicom_parser(record_property):
    r = np.random.default_rng(6)
    for _ in range(200):
        values = random_values(r, SCHEMA)
        raw = write_dicom(values, extra_elements=bool(r.integers(2)),
                          instance_uid=f"1.2.826.0.1.{int(r.integers(1, 10**9))}")
        assert dict(parse_dicom(raw).values) == values

    kinds = {}
    for _ in range(200):
        raw = write_dicom(random_values(r, SCHEMA))
        kind, bad = _corrupt(raw, r)
        kinds[kind] = kinds.get(kind, 0) + 1
        with pytest.raises(FormatError):
            parse_dicom(bad)
    record_property("detail", ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))

    for uid in ("1.2.840.10008.1.2", "1.2.840.10008.1.2.2", "1.2.840.10008.1.2.4.50"):
        with pytest.raises(UnsupportedTransferSyntaxError) as info:
            parse_dicom(write_dicom({"sex": "F"}, transfer_syntax=uid))
        assert info.value.uid == uid and uid in str(info.value)


@pytest.mark.slow
@pytest.mark.criterion(7, "planted-signal synth (200/100, 8x16x16x16, patch 2x4x4x4, default model) test accuracy >= 0.90, < 3 min")
def test_learning_at_desk_scale(tmp_path, record_property):
    start = time.perf_counter()
    cfg = SynthConfig(n_samples=200, n_test=100, dims=(8, 16, 16, 16), amplitude=5.0, noise_sigma=1.0)
    result = synth_dataset(cfg, 7, tmp_path / "data")
    train = load_manifest(result["train"]["manifest"])
    test = load_manifest(result["test"]["manifest"])

    # feasibility: the cuboid mean-difference rule on the held-out split
    r0, r1 = class_regions(cfg, 7)
    correct = 0
    for s in test.samples:
        data = load_volume(s.volume).data
        score = data[(slice(None),) + r0].mean() - data[(slice(None),) + r1].mean()
        correct += int((0 if score > 0 else 1) == s.label)
    oracle = correct / len(test)
    assert oracle >= 0.99

    run = train_loop(train, ModelConfig(), TrainConfig(epochs=10, seed=0), PatchSpec(2, 4, 4, 4),
                     out_dir=tmp_path / "run", eval_dataset=test)
    accuracy = evaluate(run.final_checkpoint, test).accuracy
    elapsed = time.perf_counter() - start
    curve = ",".join(f"{h['eval_accuracy']:.2f}" for h in run.history)
    record_property("detail", f"oracle={oracle:.2f}, final test acc={accuracy:.2f}, per-epoch [{curve}], {elapsed:.0f}s")
    assert accuracy >= 0.90
    assert elapsed < 180


@pytest.mark.criterion(8, "two-domain confounded synth, lambda=0.1: final-epoch L_DA < epoch-1 L_DA; MMD closed forms within 1e-9")
def test_domain_adaptation(tmp_path, record_property):
    z = Tensor([[0.0, 0.0], [1.0, 0.0]])
    pair, _ = mmd_domain_loss(z, ["a", "b"], bandwidth=1.0)
    assert abs(pair.item() - (2.0 - 2.0 * math.exp(-0.5))) <= 1e-9
    x = np.random.default_rng(8).normal(size=(6, 4))
    same, _ = mmd_domain_loss(Tensor(np.vstack([x, x])), ["a"] * 6 + ["b"] * 6)
    assert abs(same.item()) <= 1e-12
    single, degenerate = mmd_domain_loss(Tensor(x), ["a"] * 6)
    assert degenerate and single.item() == 0.0

    cfg = SynthConfig(n_samples=64, dims=(4, 8, 8, 8), domain_count=2, confound=1.0)
    result = synth_dataset(cfg, 8, tmp_path)
    run = train_loop(load_manifest(result["train"]["manifest"]), ModelConfig(d=16, heads=2, L_self=1, L_cross=1),
                     TrainConfig(epochs=8, batch_size=16, lam=0.1, seed=0), PatchSpec(2, 4, 4, 4))
    first, last = run.history[0]["loss_da"], run.history[-1]["loss_da"]
    record_property("detail", f"L_DA epoch 1 = {first:.4f}, epoch {len(run.history)} = {last:.4f}")
    assert last < first


@pytest.mark.criterion(9, "AdamW decay-only step is exactly theta*(1-lr*wd); 100 steps on theta^2 reach |theta| < 0.05")
def test_optimizer_contract(record_property):
    theta = np.random.default_rng(9).normal(size=(4, 5)) * 3
    params = {"w": Tensor(theta)}
    adamw_step(params, {"w": np.zeros_like(theta)}, OptimState.zeros(params), lr=0.1, weight_decay=0.01)
    np.testing.assert_array_equal(params["w"].data, theta * (1 - 0.1 * 0.01))

    params = {"w": Tensor([1.0])}
    state = OptimState.zeros(params)
    for _ in range(100):
        adamw_step(params, {"w": 2.0 * params["w"].data}, state, lr=0.1)
    final = params["w"].data[0]
    record_property("detail", f"theta after 100 steps = {final:.6f}")
    assert abs(final) < 0.05


@pytest.mark.criterion(10, "two identical seeded `train` invocations give byte-identical checkpoints and metrics logs")
def test_cli_determinism(tmp_path, capsys, record_property):
    data = tmp_path / "data"
    assert main(["synth", "--seed", "10", "-o", str(data), "--n-samples", "32", "--domains", "2"]) == 0
    config = {
        "model": {"d": 8, "heads": 2, "L_self": 1, "L_cross": 1, "dropout_rate": 0.2},
        "train": {"epochs": 3, "batch_size": 8},
        "data": {"manifest": "data/manifest.json", "patch": [2, 4, 4, 4]},
        "output_dir": "run",
    }
    (tmp_path / "run.json").write_text(json.dumps(config))
    capsys.readouterr()
    outputs = []
    for name in ("first", "second"):
        assert main(["train", "--config", str(tmp_path / "run.json"), "--seed", "42", "-o", str(tmp_path / name)]) == 0
        outputs.append(json.loads(capsys.readouterr().out))
    for artifact in ("final.ckpt", "best.ckpt", "metrics.jsonl"):
        assert (tmp_path / "first" / artifact).read_bytes() == (tmp_path / "second" / artifact).read_bytes()
    assert outputs[0]["checkpoint_sha256"] == outputs[1]["checkpoint_sha256"]
    record_property("detail", f"sha256 {outputs[0]['checkpoint_sha256'][:16]}...")
