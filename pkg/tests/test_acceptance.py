"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line with its numbers.

The training checks (7, 8) and
the throughput check (9) are marked ``slow``.
"""
import json
import time
import zlib

import numpy as np
import pytest

from gradcheck import check_grads
from test_metrics import brute_force_cost, random_labels, single_event
from test_model import config_for, dense_attention
from test_tensor import PRIMITIVES

from seldlab import dsp, synth
from seldlab.accdoa import FrameLabels, decode, encode
from seldlab.cli import main
from seldlab.config import build_config
from seldlab.data import Dataset, write_dataset
from seldlab.metrics import angular_error, hungarian, score
from seldlab.model import ModelConfig, SeldNet, load_checkpoint, param_count, self_attention
from seldlab.tensor import Tensor
from seldlab.train import evaluate, fit_stats, train_run

BEST_ROW = dict(n_blocks=2, n_heads=8, use_pos_emb=True, use_ln_residual=True)


@pytest.fixture
def report(capsys):
    """Print the criterion's PASS/FAIL line past output capture, then assert it."""
    def _report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail
    return _report


def desk_config(**overrides):
    pairs = []
    for k, v in {**BEST_ROW, **overrides}.items():
        pairs += [f"--{k}", json.dumps(v)]
    return build_config(preset="desk", overrides=pairs)


# 1 ---------------------------------------------------------------------------
def test_criterion_01_parameter_counts(report):
    want = {
        (0, 0, False, False, None): (0.5, 0.1),
        (1, 4, False, False, None): (0.3, 0.1), (1, 8, False, False, None): (0.6, 0.1),
        (1, 12, False, False, None): (0.9, 0.1), (2, 8, False, False, None): (1.1, 0.1),
        (3, 8, False, False, None): (1.6, 0.1), (2, 12, False, True, None): (1.6, 0.1),
        (3, 12, False, True, None): (2.4, 0.1),
        (3, 8, False, True, (128, 256, 128)): (2.2, 0.6),
        (3, 8, False, True, (128, 64, 128)): (1.4, 0.6),
    }
    t0 = time.perf_counter()
    got = {row: param_count(config_for(row)) / 1e6 for row in want}
    elapsed = time.perf_counter() - t0
    bad = {row: round(m, 3) for row, m in got.items() if abs(m - want[row][0]) > want[row][1]}
    report(1, not bad and elapsed < 1.0,
           f"{len(want) - len(bad)}/{len(want)} rows within tolerance in {elapsed:.3f}s; "
           f"off: {bad or 'none'}")


# 2 ---------------------------------------------------------------------------
def test_criterion_02_gradient_checks(report):
    t0 = time.perf_counter()
    worst = {}
    for name, (op, shapes) in sorted(PRIMITIVES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()) + 1)
        worst[name] = max(check_grads(op, [rng.uniform(-1, 1, s) for s in shapes], rng)
                          for _ in range(20))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    report(2, worst[top] < 1e-4 and elapsed < 60,
           f"{len(worst)} primitives x 20 instances, worst rel err {worst[top]:.2e} ({top}), "
           f"{elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------
def test_criterion_03_attention_oracle(report):
    rng = np.random.default_rng(30)
    dense_err = 0.0
    for _ in range(50):
        t, d, k = (int(v) for v in rng.integers(1, 7, 3))
        h, wq, wk, wv = (rng.standard_normal(s) for s in ((t, d), (d, k), (d, k), (d, d)))
        out = self_attention(Tensor(h), Tensor(wq), Tensor(wk), Tensor(wv)).data
        dense_err = max(dense_err, np.abs(out - dense_attention(h, wq, wk, wv)).max())
    h, wq, wk, wv = (rng.standard_normal(s) for s in ((3, 1, 5), (5, 4), (5, 4), (5, 5)))
    collapse = np.abs(self_attention(Tensor(h), Tensor(wq), Tensor(wk), Tensor(wv)).data
                      - h @ wv).max()

    def stack_gap(pos: bool) -> float:
        cfg = ModelConfig.mhsa(2, 4, pos, True)
        net = SeldNet(cfg, seed=3)
        if pos:
            net.params["posemb"].data = rng.uniform(-0.5, 0.5, net.params["posemb"].data.shape)
        x = rng.standard_normal((1, cfg.label_frames, cfg.cnn_out_dim))
        perm = rng.permutation(cfg.label_frames)
        a = net.temporal(Tensor(x)).data[:, perm]
        b = net.temporal(Tensor(x[:, perm])).data
        return float(np.abs(a - b).max())

    eq_gap, pos_gap = stack_gap(False), stack_gap(True)
    ok = dense_err < 1e-10 and collapse < 1e-12 and eq_gap < 1e-10 and pos_gap > 1e-6
    report(3, ok, f"dense max err {dense_err:.1e} over 50 instances; T'=1 collapse err "
                  f"{collapse:.1e}; P=No permutation gap {eq_gap:.1e}; P=Yes gap {pos_gap:.2e}")


# 4 ---------------------------------------------------------------------------
def test_criterion_04_accdoa_round_trip(report):
    rng = np.random.default_rng(40)
    failures = 0
    for _ in range(1000):
        lab = random_labels(rng, n_frames=int(rng.integers(1, 8)), p=rng.uniform())
        for tau in (0.1, 0.5, 0.9):
            back = decode(encode(lab), tau)
            if not (np.array_equal(back.det, lab.det) and np.allclose(back.doa, lab.doa,
                                                                        rtol=0, atol=1e-12)):
                failures += 1
    report(4, failures == 0, f"1000 tensors x 3 thresholds, {failures} mismatches")


# 5 ---------------------------------------------------------------------------
def test_criterion_05_metric_oracle(report):
    ref = random_labels(np.random.default_rng(50), 50)
    perfect = score(ref, ref).as_tuple()
    empty = score(ref, FrameLabels.empty(50))
    off30 = score(single_event(3, [1, 0, 0]), single_event(3, synth.direction(30.0, 0.0)))
    rng = np.random.default_rng(51)
    mism = 0
    for _ in range(200):
        n, m = (int(v) for v in rng.integers(1, 4, 2))
        cost = rng.uniform(0, 180, (n, m))
        mism += abs(sum(cost[i, j] for i, j in hungarian(cost)) - brute_force_cost(cost)) > 1e-9
    ok = (perfect == (0.0, 100.0, 0.0, 100.0)
          and (empty.er20, empty.f20, empty.lr_cd) == (1.0, 0.0, 0.0)
          and (off30.f20, off30.lr_cd) == (0.0, 100.0) and abs(off30.le_cd - 30.0) < 1e-9
          and mism == 0)
    report(5, ok, f"self {perfect}; empty ER {empty.er20} F {empty.f20} LR {empty.lr_cd}; "
                  f"30deg F {off30.f20} LE {off30.le_cd:.6f} LR {off30.lr_cd}; "
                  f"hungarian mismatches {mism}/200")


# 6 ---------------------------------------------------------------------------
def test_criterion_06_doa_recovery(report):
    fb = dsp.default_filterbank()
    rng = np.random.default_rng(60)
    clean = 0.0
    for i in range(100):
        v = rng.standard_normal(3)
        d = v / np.linalg.norm(v)
        s = np.random.default_rng(i).standard_normal(4800)
        x = dsp.FoaClip(np.stack([s, d[1] * s, d[2] * s, d[0] * s]))
        inten = dsp.foa_intensity(dsp.stft(x), fb)
        clean = max(clean, np.abs(inten - d[:, None, None]).max())
    noisy = 0.0
    for i in range(10):
        az, el = float(rng.uniform(-180, 180)), float(rng.uniform(-45, 45))
        cls = int(rng.integers(0, 12))
        clip = synth.render_scene(synth.SceneSpec(seed=100 + i, n_clips=1, clip_len_s=2.0,
                                                  events=[[synth.EventSpec(cls, 2, 18, az, el)]]))[0]
        inten = dsp.foa_intensity(dsp.stft(clip.audio), fb)
        band = int(np.argmax(fb[:, int(round(synth.fundamental(cls) * dsp.N_FFT / dsp.SAMPLE_RATE))]))
        for t in range(15, 80):
            u = inten[:, t, band]
            noisy = max(noisy, angular_error(u / np.linalg.norm(u), synth.direction(az, el)))
    report(6, clean < 1e-6 and noisy < 2.0,
           f"noiseless max component err {clean:.1e} over 100 directions; "
           f"worst angle at default SNR {noisy:.3f} deg")


# 7 ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    write_dataset(root, synth.SceneSpec(seed=7, n_clips=30))
    return Dataset(root)


@pytest.mark.slow
def test_criterion_07_overfit(overfit_data, tmp_path, report):
    assert len(overfit_data.ids("train")) == 20
    cfg = desk_config(epochs=50, seeds=[0])
    t0 = time.perf_counter()
    rec = train_run(cfg, overfit_data, 0, out=tmp_path, score_split=None)
    net, stats = load_checkpoint(tmp_path / "last.ckpt")
    s, _ = evaluate(net, stats, overfit_data.load("train"), cfg.threshold)
    first5 = rec.train_loss[:5]
    decreasing = all(b < a for a, b in zip(first5, first5[1:]))
    report(7, s.f20 >= 90 and s.le_cd <= 10 and decreasing,
           f"train F20 {s.f20:.1f} (>=90), LE_CD {s.le_cd:.2f} (<=10), LR_CD {s.lr_cd:.1f}, "
           f"first-5 train loss {[round(v, 4) for v in first5]} strictly decreasing={decreasing}; "
           f"{cfg.epochs} epochs batch {cfg.batch_size} in {time.perf_counter() - t0:.0f}s")


# 8 ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = desk_config()
    write_dataset(root, synth.SceneSpec(seed=0, n_clips=cfg.clips))
    return Dataset(root)


@pytest.mark.slow
def test_criterion_08_learning_beats_fresh_model(desk_data, tmp_path, report):
    cfg = desk_config(seeds=[0])
    rec = train_run(cfg, desk_data, 0, out=tmp_path, score_split="eval")
    trained = rec.scores
    stats = fit_stats(desk_data.load("train"))
    fresh, _ = evaluate(SeldNet(cfg.model, seed=0), stats, desk_data.load("eval"), cfg.threshold)
    ok = trained["f20"] > fresh.f20 + 10 and trained["lr_cd"] > fresh.lr_cd + 10
    report(8, ok, f"held-out trained F20 {trained['f20']:.1f} LR_CD {trained['lr_cd']:.1f} vs "
                  f"fresh F20 {fresh.f20:.1f} LR_CD {fresh.lr_cd:.1f} (needs +10 on both); "
                  f"best epoch {rec.best_epoch + 1}/{cfg.epochs}")


# 9 ---------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_09_throughput(capsys, report):
    code = main(["bench", "--mode", "both", "--batches", "100", "--batch-size", "32"])
    out = capsys.readouterr().out
    assert code == 0
    rep = json.loads(out)
    multi, single = rep["modes"]["parallel"], rep["modes"]["single"]
    report(9, multi["ratio"] >= 1.0,
           f"multi-threaded MHSA/GRU ratio {multi['ratio']:.3f} "
           f"({multi['mhsa_chunks_per_s']:.1f} vs {multi['gru_chunks_per_s']:.1f} chunks/s); "
           f"single-thread ratio {single['ratio']:.3f}; B=32, T={rep['feature_frames']}, "
           f"{rep['batches']} batches")


# 10 --------------------------------------------------------------------------
def _cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    assert code == 0, argv
    return out


def test_criterion_10_determinism(tmp_path, capsys, report):
    synth_args = ["synth", "--clips", "4", "--seed", "5", "--clip-len", "6"]
    _cli(capsys, *synth_args, "--out", tmp_path / "a")
    _cli(capsys, *synth_args, "--out", tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    synth_same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                     for f in files)

    train_args = ["train", "--data", tmp_path / "a", "--epochs", "2", "--seeds", "[4]",
                  "--batch_size", "2", "--n_blocks", "2", "--n_heads", "8"]
    _cli(capsys, *train_args, "--out", tmp_path / "r1")
    _cli(capsys, *train_args, "--out", tmp_path / "r2")
    ckpts = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*.ckpt"))
    ckpt_same = bool(ckpts) and all(
        (tmp_path / "r1" / c).read_bytes() == (tmp_path / "r2" / c).read_bytes() for c in ckpts)

    best = tmp_path / "r1" / ckpts[0]
    eval_args = ["eval", "--checkpoint", best, "--data", tmp_path / "a", "--split", "all"]
    e1 = _cli(capsys, *eval_args, "--pred-out", tmp_path / "p1")
    e2 = _cli(capsys, *eval_args, "--pred-out", tmp_path / "p2")
    preds_same = all((tmp_path / "p1" / p.name).read_bytes() == p.read_bytes()
                     for p in (tmp_path / "p2").glob("*.csv"))
    score_args = ["score", "--ref", tmp_path / "a" / "labels", "--pred", tmp_path / "a" / "labels"]
    s1, s2 = _cli(capsys, *score_args), _cli(capsys, *score_args)
    ok = synth_same and ckpt_same and e1 == e2 and preds_same and s1 == s2
    report(10, ok, f"synth {len(files)} files identical={synth_same}; {len(ckpts)} checkpoints "
                   f"identical={ckpt_same}; eval stdout identical={e1 == e2}, predictions "
                   f"identical={preds_same}; score stdout identical={s1 == s2}")
