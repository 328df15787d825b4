"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline.
Everything is deterministic given the pinned seeds.
"""

import itertools
import math
import time
from collections import Counter

import numpy as np
import pytest
import torch

from aesdistill.align_trainer import AlignTrainConfig, run_alignment
from aesdistill.attention import AttentionMap, mean_attention_distance, \
    mean_attention_entropy
from aesdistill.data import (BatchPlan, Manifest, Normalization,
                             PreprocessSpec, SampleRecord, compose_batches)
from aesdistill.distill_trainer import (DistillTrainConfig, finetune_teacher,
                                        run_skd)
from aesdistill.losses import cosine_alignment, emd
from aesdistill.metrics import (EvalPair, IerConfig, interval_error_rate, mse,
                                plcc, srcc)
from aesdistill.models import (PredictionHead, Projector, build_encoder,
                               freeze, load_checkpoint, params_digest)
from aesdistill.runio import read_jsonl
from aesdistill.synthetic import SyntheticSpec, generate

from conftest import DESK_BINS, DESK_NORM, DESK_PREPROCESS, SMALL_VIT_SPEC, VIT_SPEC
from oracles import (attention_distance_naive, attention_entropy_naive,
                     central_difference_gradient, emd_naive, ier_naive,
                     mean_std_naive, mse_naive, pearson_naive, spearman_naive)


def check(criterion: str, ok: bool, detail: str = "") -> None:
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'}"
          + (f" ({detail})" if detail else ""))
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="session")
def acceptance_data(tmp_path_factory):
    """Pinned datasets for the trend criteria.

    train: 256 labeled images with noisy labels plus a 256-image unlabeled
    twin; eval: 64 noise-free images from a disjoint draw.
    """
    root = tmp_path_factory.mktemp("acceptance")
    train, unlabeled = generate(
        SyntheticSpec(n=256, unlabeled_n=256, image_size=48, seed=7,
                      noise_level=0.3), root / "train")
    evald, _ = generate(
        SyntheticSpec(n=64, unlabeled_n=1, image_size=48, seed=99,
                      noise_level=0.0), root / "eval")
    return {"root": root, "train": train, "unlabeled": unlabeled, "eval": evald}


def rand_probs(rng, d):
    w = rng.random(d) + 1e-3
    return w / w.sum()


def test_c01_emd_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.time()
    worst = 0.0
    for d, r in itertools.product((2, 5, 10), (1.0, 2.0)):
        p = np.stack([rand_probs(rng, d) for _ in range(1000)])
        q = np.stack([rand_probs(rng, d) for _ in range(1000)])
        got = emd(torch.tensor(p), torch.tensor(q), r).numpy()
        want = np.array([emd_naive(list(pi), list(qi), r)
                         for pi, qi in zip(p, q)])
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.time() - start
    check("C1 emd oracle equivalence",
          worst <= 1e-9 and elapsed < 5.0,
          f"worst |diff| {worst:.2e}, {elapsed:.1f}s")


def _rel_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(np.asarray(analytic) - np.asarray(numeric))) / scale)


def test_c02_gradient_checks():
    rng = np.random.default_rng(102)
    start = time.time()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 10))
        x1, x2 = rng.normal(size=n), rng.normal(size=n)
        t1 = torch.tensor(x1, requires_grad=True)
        t2 = torch.tensor(x2, requires_grad=True)
        cosine_alignment(t1, t2).backward()
        num1 = central_difference_gradient(
            lambda v: float(cosine_alignment(torch.tensor(v, dtype=torch.float64),
                                             torch.tensor(x2))), list(x1))
        num2 = central_difference_gradient(
            lambda v: float(cosine_alignment(torch.tensor(x1),
                                             torch.tensor(v, dtype=torch.float64))),
            list(x2))
        worst = max(worst, _rel_error(t1.grad.numpy(), num1),
                    _rel_error(t2.grad.numpy(), num2))
    for i in range(100):
        r = 1.0 if i % 2 == 0 else 2.0
        d = int(rng.integers(3, 11))
        p = rand_probs(rng, d)
        q = rand_probs(rng, d)
        tp = torch.tensor(p, requires_grad=True)
        tq = torch.tensor(q, requires_grad=True)
        emd(tp, tq, r).backward()
        nump = central_difference_gradient(
            lambda v: float(emd(torch.tensor(v, dtype=torch.float64),
                                torch.tensor(q), r)), list(p))
        numq = central_difference_gradient(
            lambda v: float(emd(torch.tensor(p),
                                torch.tensor(v, dtype=torch.float64), r)), list(q))
        worst = max(worst, _rel_error(tp.grad.numpy(), nump),
                    _rel_error(tq.grad.numpy(), numq))
    elapsed = time.time() - start
    check("C2 gradient checks", worst < 1e-4 and elapsed < 30.0,
          f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_c03_metric_oracles():
    rng = np.random.default_rng(103)
    start = time.time()
    worst = 0.0
    exact_invariance = True
    for i in range(1000):
        n = int(rng.integers(5, 40))
        if i % 2 == 0:
            pred = rng.normal(size=n)
            truth = 0.5 * pred + rng.normal(size=n)
        else:
            pred = rng.integers(0, 6, size=n).astype(float)  # tied ranks
            truth = rng.integers(0, 6, size=n).astype(float)
            if len(set(pred)) < 2 or len(set(truth)) < 2:
                continue
        pairs = [EvalPair(float(a), float(b)) for a, b in zip(pred, truth)]
        worst = max(worst,
                    abs(mse(pairs) - mse_naive(pairs)),
                    abs(plcc(pairs) - pearson_naive(pred, truth)),
                    abs(srcc(pairs) - spearman_naive(list(pred), list(truth))))
        warped = [EvalPair(math.exp(0.5 * a) + 2.0 * a, float(b))
                  for a, b in zip(pred, truth)]
        if srcc(warped) != srcc(pairs):
            exact_invariance = False
    elapsed = time.time() - start
    check("C3 metric oracles", worst <= 1e-9 and exact_invariance and elapsed < 10.0,
          f"worst |diff| {worst:.2e}, invariance exact: {exact_invariance}, "
          f"{elapsed:.1f}s")


def test_c04_ier_correctness():
    # intervals of width 3 over [1, 10]: [1,4) [4,7) [7,10]; tolerance 0.5
    pairs = [
        EvalPair(1.0, 1.5), EvalPair(2.0, 3.0),     # interval 0: 1 error of 2
        EvalPair(4.6, 4.0), EvalPair(5.0, 5.2),     # interval 1: 1 error of 2
        EvalPair(8.0, 8.4), EvalPair(9.9, 9.0), EvalPair(9.0, 10.0),  # 2 of 3
    ]
    cfg = IerConfig(k=3, t=0.5, lo=1.0, hi=10.0)
    report = interval_error_rate(pairs, cfg)
    counts, errors = ier_naive(pairs, 3, 0.5, 1.0, 10.0)
    ok = ([s.n for s in report.intervals] == counts == [2, 2, 3]
          and report.intervals[0].ier == 0.5
          and report.intervals[1].ier == 0.5
          and abs(report.intervals[2].ier - 2 / 3) < 1e-12)
    # empty intervals are reported as undefined
    sparse = interval_error_rate([EvalPair(1.0, 1.0)],
                                 IerConfig(k=4, t=0.5, lo=1.0, hi=9.0))
    ok = ok and sparse.intervals[0].n == 1 and all(
        s.ier is None for s in sparse.intervals[1:])
    check("C4 interval error rate", ok)


def test_c05_batch_composition():
    labeled = Manifest(records=tuple(
        SampleRecord(id=f"l{i:02d}", uri="u") for i in range(16)), labeled=False)
    unlabeled = Manifest(records=tuple(
        SampleRecord(id=f"u{i:02d}", uri="u") for i in range(50)), labeled=False)
    ok = True
    detail = ""
    for b_s, mu in ((2, 3), (4, 15), (8, 0)):
        plan = BatchPlan(b_s=b_s, mu=mu)
        for epoch in range(20):
            emitted = Counter()
            for batch in compose_batches(labeled, unlabeled if mu else None,
                                         plan, epoch_seed=epoch * 31 + b_s):
                if (len(batch.labeled_ids) != b_s
                        or len(batch.unlabeled_ids) != mu * b_s):
                    ok, detail = False, f"bad segment sizes at plan ({b_s},{mu})"
                emitted.update(batch.labeled_ids)
            if emitted != Counter(labeled.ids):
                ok, detail = False, f"labeled coverage broken at plan ({b_s},{mu})"
    check("C5 batch composition", ok, detail)


def test_c06_degenerate_skd_reduction(synth_dataset, tmp_path):
    labeled = synth_dataset["labeled"]
    cfg = DistillTrainConfig(lr=1e-3, decay_epochs=(8,), total_epochs=2, b_s=8,
                             mu=0, beta=0.0)

    def student():
        backbone = build_encoder(SMALL_VIT_SPEC, seed=4)
        torch.manual_seed(1004)
        head = PredictionHead(SMALL_VIT_SPEC.feature_dim, n_bins=10)
        return backbone, head

    sup_b, sup_h = student()
    finetune_teacher(sup_b, sup_h, labeled, labeled, DESK_BINS, cfg,
                     DESK_PREPROCESS, DESK_NORM, tmp_path / "sup", seed=7)
    skd_b, skd_h = student()
    teacher_b = freeze(build_encoder(VIT_SPEC, seed=9))
    torch.manual_seed(9)
    teacher_h = PredictionHead(VIT_SPEC.feature_dim, n_bins=10)
    freeze(teacher_h)
    run_skd(skd_b, skd_h, teacher_b, teacher_h, labeled, None, labeled,
            DESK_BINS, cfg, DESK_PREPROCESS, DESK_NORM, DESK_NORM,
            tmp_path / "skd", seed=7)

    sup_log = read_jsonl(tmp_path / "sup" / "train_log.jsonl")
    skd_log = read_jsonl(tmp_path / "skd" / "train_log.jsonl")
    losses_equal = (len(sup_log) == len(skd_log) and all(
        abs(a["loss"] - b["loss_total"]) <= 1e-9
        for a, b in zip(sup_log, skd_log)))
    params_equal = (params_digest(sup_b) == params_digest(skd_b)
                    and params_digest(sup_h) == params_digest(skd_h))
    check("C6 degenerate SKD reduction", losses_equal and params_equal,
          f"losses equal: {losses_equal}, params bit-identical: {params_equal}")


def test_c07_loss_decomposition(synth_dataset, tmp_path):
    labeled = Manifest(records=synth_dataset["labeled"].records[:16],
                       labeled=True, bin_values=DESK_BINS)
    unlabeled = synth_dataset["unlabeled"]
    beta = 2.0
    cfg = DistillTrainConfig(lr=1e-3, decay_epochs=(8,), total_epochs=2, b_s=4,
                             mu=3, beta=beta)
    teacher_b = freeze(build_encoder(VIT_SPEC, seed=0))
    torch.manual_seed(0)
    teacher_h = PredictionHead(VIT_SPEC.feature_dim, n_bins=10)
    freeze(teacher_h)
    student_b = build_encoder(SMALL_VIT_SPEC, seed=1)
    torch.manual_seed(1001)
    student_h = PredictionHead(SMALL_VIT_SPEC.feature_dim, n_bins=10)
    run_skd(student_b, student_h, teacher_b, teacher_h, labeled, unlabeled,
            labeled, DESK_BINS, cfg, DESK_PREPROCESS, DESK_NORM, DESK_NORM,
            tmp_path / "run", seed=0)
    log = read_jsonl(tmp_path / "run" / "train_log.jsonl")
    expected_terms = cfg.b_s * (1 + cfg.mu)
    ok = bool(log) and all(
        abs(rec["loss_total"] - (rec["loss_s"] + beta * rec["loss_kd"])) <= 1e-9
        and rec["kd_terms"] == expected_terms
        for rec in log)
    check("C7 loss decomposition", ok,
          f"{len(log)} steps, every KD term over B={expected_terms} samples")


def test_c08_cfa_smoke(acceptance_data, tmp_path):
    start = time.time()
    manifest = acceptance_data["unlabeled"]  # 256 images
    teacher = freeze(build_encoder(VIT_SPEC, seed=42))
    digest_before = params_digest(teacher)
    cfg = AlignTrainConfig(lr=1e-3, decay_factor=0.1, decay_epochs=(3,),
                           total_epochs=3, batch_size=16)
    ok = True
    detail = []
    for seed in (0, 1, 2):
        backbone = build_encoder(SMALL_VIT_SPEC, seed=seed)
        torch.manual_seed(seed)
        projector = Projector(SMALL_VIT_SPEC.feature_dim, VIT_SPEC.feature_dim)
        res = run_alignment(backbone, projector, teacher, manifest,
                            DESK_PREPROCESS, DESK_NORM, DESK_NORM, cfg,
                            tmp_path / f"seed{seed}", seed=seed)
        e = res.epoch_losses
        decreasing = e[0] > e[1] > e[2]
        ok = ok and decreasing
        detail.append(f"seed {seed}: {e[0]:.3f}>{e[1]:.3f}>{e[2]:.3f}"
                      f" {'ok' if decreasing else 'NOT DECREASING'}")
    hash_ok = params_digest(teacher) == digest_before
    elapsed = time.time() - start
    check("C8 alignment smoke",
          ok and hash_ok and elapsed < 180.0,
          "; ".join(detail) + f"; teacher unchanged: {hash_ok}; {elapsed:.0f}s")


def test_c09_end_to_end_trend(acceptance_data, tmp_path):
    start = time.time()
    train = acceptance_data["train"]
    evald = acceptance_data["eval"]
    labeled_small = Manifest(records=train.records[:8], labeled=True,
                             bin_values=DESK_BINS)
    unlabeled_pool = Manifest(records=acceptance_data["unlabeled"].records[:32],
                              labeled=False)  # 4x the labeled subset

    teacher_b = build_encoder(VIT_SPEC, seed=0)
    torch.manual_seed(0)
    teacher_h = PredictionHead(VIT_SPEC.feature_dim, n_bins=10)
    tcfg = DistillTrainConfig(lr=2e-3, decay_epochs=(8,), total_epochs=14,
                              b_s=16, mu=0, beta=0.0)
    tres = finetune_teacher(teacher_b, teacher_h, train, evald, DESK_BINS, tcfg,
                            DESK_PREPROCESS, DESK_NORM, tmp_path / "teacher",
                            seed=0)
    freeze(teacher_b), freeze(teacher_h)

    def student_run(tag, seed, mu, beta, pool):
        backbone = build_encoder(SMALL_VIT_SPEC, seed=100 + seed)
        torch.manual_seed(200 + seed)
        head = PredictionHead(SMALL_VIT_SPEC.feature_dim, n_bins=10)
        cfg = DistillTrainConfig(lr=1e-3, decay_epochs=(20,), total_epochs=24,
                                 b_s=4, mu=mu, beta=beta)
        res = run_skd(backbone, head, teacher_b, teacher_h, labeled_small, pool,
                      evald, DESK_BINS, cfg, DESK_PREPROCESS, DESK_NORM,
                      DESK_NORM, tmp_path / f"{tag}{seed}", seed=seed)
        return res.best_srcc

    sup, kd, skd = [], [], []
    for seed in (0, 1, 2):
        sup.append(student_run("sup", seed, 0, 0.0, None))
        kd.append(student_run("kd", seed, 0, 1.0, None))
        skd.append(student_run("skd", seed, 4, 1.0, unlabeled_pool))
    med = lambda v: float(np.median(v))
    elapsed = time.time() - start
    ok = med(skd) >= med(sup) and med(kd) <= med(skd) and elapsed < 900.0
    check("C9 end-to-end trend (SKD vs KD vs supervised)", ok,
          f"teacher srcc {tres.report.srcc:.3f}; medians: supervised {med(sup):.3f},"
          f" labeled-only KD {med(kd):.3f}, SKD {med(skd):.3f}; {elapsed:.0f}s")


def test_c10_attention_statistics(acceptance_data, tmp_path):
    rng = np.random.default_rng(110)
    worst = 0.0
    for grid, cls_present in (((1, 1), False), ((2, 3), True), ((8, 8), False),
                              ((8, 8), True)):
        n = grid[0] * grid[1] + (1 if cls_present else 0)  # up to 65 tokens
        for _ in range(5):
            w = rng.random((3, n, n)) + 1e-3
            w = w / w.sum(axis=-1, keepdims=True)
            amap = AttentionMap(weights=w, grid=grid, cls_present=cls_present)
            mean, std = mean_attention_distance(amap)
            want_mean, want_std = mean_std_naive(
                attention_distance_naive(w, grid, cls_present))
            ent = mean_attention_entropy(amap)
            want_ent = mean_std_naive(attention_entropy_naive(w))[0]
            worst = max(worst, abs(mean - want_mean), abs(std - want_std),
                        abs(ent - want_ent))
    uniform = AttentionMap(weights=np.full((2, 65, 65), 1.0 / 65),
                           grid=(8, 8), cls_present=True)
    uniform_err = abs(mean_attention_entropy(uniform) - math.log(65))

    # attn-report on two desk checkpoints emits finite per-layer stats
    from dataclasses import asdict
    from aesdistill.cli import main as cli_main
    from aesdistill.models import save_checkpoint
    from aesdistill.runio import read_json
    paths = []
    for seed in (1, 2):
        enc = build_encoder(SMALL_VIT_SPEC, seed=seed)
        path = tmp_path / f"enc{seed}.pt"
        save_checkpoint(path, {"encoder_spec": asdict(SMALL_VIT_SPEC),
                               "backbone": enc.state_dict(),
                               "epoch": 0, "step": 0})
        paths.append(path)
    probe = acceptance_data["root"] / "train" / "unlabeled.jsonl"
    code = cli_main(["attn-report", "--profile", "desk",
                     "--before", str(paths[0]), "--after", str(paths[1]),
                     "--probe", str(probe), "--out", str(tmp_path / "report")])
    finite = False
    if code == 0:
        report = read_json(tmp_path / "report" / "attn_report.json")
        finite = len(report["layers"]) == SMALL_VIT_SPEC.depth and all(
            np.isfinite(v)
            for layer in report["layers"]
            for part in ("before", "after", "delta")
            for v in layer[part].values())
    check("C10 attention statistics",
          worst <= 1e-9 and uniform_err <= 1e-9 and code == 0 and finite,
          f"worst oracle |diff| {worst:.2e}, uniform entropy err {uniform_err:.2e},"
          f" report finite: {finite}")


def test_c11_determinism_and_resume(acceptance_data, tmp_path):
    manifest = Manifest(records=acceptance_data["unlabeled"].records[:64],
                        labeled=False)
    teacher = freeze(build_encoder(VIT_SPEC, seed=5))
    cfg = AlignTrainConfig(lr=1e-3, decay_factor=0.1, decay_epochs=(2,),
                           total_epochs=3, batch_size=16)

    def fresh():
        backbone = build_encoder(SMALL_VIT_SPEC, seed=6)
        torch.manual_seed(6)
        projector = Projector(SMALL_VIT_SPEC.feature_dim, VIT_SPEC.feature_dim)
        return backbone, projector

    logs = []
    digests = []
    for tag in ("a", "b"):
        backbone, projector = fresh()
        run_alignment(backbone, projector, teacher, manifest, DESK_PREPROCESS,
                      DESK_NORM, DESK_NORM, cfg, tmp_path / tag, seed=13)
        logs.append(read_jsonl(tmp_path / tag / "train_log.jsonl"))
        digests.append(params_digest(backbone))
    identical_logs = logs[0] == logs[1] and digests[0] == digests[1]

    backbone, projector = fresh()
    short = AlignTrainConfig(lr=1e-3, decay_factor=0.1, decay_epochs=(2,),
                             total_epochs=2, batch_size=16)
    run_alignment(backbone, projector, teacher, manifest, DESK_PREPROCESS,
                  DESK_NORM, DESK_NORM, short, tmp_path / "part", seed=13)
    state = load_checkpoint(tmp_path / "part" / "resume.pt")
    backbone2, projector2 = fresh()
    run_alignment(backbone2, projector2, teacher, manifest, DESK_PREPROCESS,
                  DESK_NORM, DESK_NORM, cfg, tmp_path / "part", seed=13,
                  resume_state=state)
    resume_equal = params_digest(backbone2) == digests[0]
    check("C11 determinism and resume", identical_logs and resume_equal,
          f"identical logs: {identical_logs}, resume equals uninterrupted: "
          f"{resume_equal}")
