"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Budgeted scenes keep the whole module within a few minutes.
"""
import io
import math
import time

import numpy as np
import pytest

from voxfuse import synth
from voxfuse.core import MapConfig
from voxfuse.fusion import fuse_all, fuse_instance, fuse_voxel
from voxfuse.instance_layer import InstanceLayer, InstanceProposal
from voxfuse.pipeline import run_mapping
from voxfuse.formats import write_snapshot
from voxfuse.query_eval import PromptSet, evaluate, layer_embeddings, predict_classes

from oracles import (
    association_decision,
    confusion_metrics,
    dense_batch_means,
    instance_batch_means,
    two_stage_instance_fusion,
)
from test_fusion import make_layers


def random_orbit_stream(rng, seed, dim=64):
    scene, traj = synth.orbit_scene(
        n_objects=int(rng.integers(3, 7)),
        seed=seed,
        dim=dim,
        n_object_classes=int(rng.integers(3, 6)),
        n_frames=int(rng.integers(8, 16)),
    )
    buf = io.BytesIO()
    gt, prompts = synth.generate_stream(
        scene, traj, synth.default_intrinsics(),
        synth.NoiseModel.profile("default"), seed, buf,
    )
    buf.seek(0)
    return buf, gt, prompts


def miou_of(layer, snap, gt, prompts, fused_dense=None, fused_instances=None):
    embs = layer_embeddings(
        layer, snap.dense, snap.instance,
        fused_dense=fused_dense, fused_instances=fused_instances,
    )
    preds = predict_classes(embs, prompts)
    return evaluate(preds, gt, prompts, exclude_background=True).miou


def test_oracle_equivalence_dense():
    """>= 50 random streams: running means match the batch oracle (1e-5 rel)."""
    t0 = time.time()
    rng = np.random.default_rng(2024)
    n_streams = 50
    checked = 0
    for i in range(n_streams):
        buf, _, _ = random_orbit_stream(rng, seed=1000 + i)
        log = []
        snap, rep = run_mapping(buf, MapConfig(), seed=1000 + i, observation_log=log)
        assert rep.frames_seen <= 200
        oracle = dense_batch_means(log)
        assert set(oracle) == set(snap.dense.voxels)
        for key, (mean, weight) in oracle.items():
            vox = snap.dense.voxels[key]
            assert vox.weight == weight  # unit-count weights are exact
            err = np.linalg.norm(vox.embedding.astype(np.float64) - mean)
            assert err <= 1e-5 * max(np.linalg.norm(mean), 1e-12)
            checked += 1
    elapsed = time.time() - t0
    assert elapsed < 60.0, f"dense oracle took {elapsed:.1f}s (budget 60s)"
    print(f"\nACCEPTANCE oracle-equivalence-dense: PASS "
          f"({n_streams} streams, {checked} voxels, {elapsed:.1f}s)")


def test_oracle_equivalence_instance():
    """Association log replay: batch means within 1e-5, IoU decisions exact."""
    rng = np.random.default_rng(4048)
    n_events = 0
    n_instances = 0
    for i in range(12):
        buf, _, _ = random_orbit_stream(rng, seed=2000 + i)
        log = []
        snap, _ = run_mapping(buf, MapConfig(), seed=2000 + i, association_log=log)
        oracle = instance_batch_means(log)
        assert set(oracle) == set(snap.instance.instances)
        for iid, (mean, weight) in oracle.items():
            rec = snap.instance.instances[iid]
            assert rec.weight == weight
            err = np.linalg.norm(rec.embedding.astype(np.float64) - mean)
            assert err <= 1e-5 * max(np.linalg.norm(mean), 1e-12)
        for event in log:
            decision, matched = association_decision(event, MapConfig().iou_threshold)
            assert decision == event.decision
            if decision == "match":
                assert matched == event.instance_id
        n_events += len(log)
        n_instances += len(oracle)
    print(f"\nACCEPTANCE oracle-equivalence-instance: PASS "
          f"({n_events} association events, {n_instances} instances)")


def test_fusion_algebra():
    """Closed form vs two-stage (1e-6, 1000 cases); fuse_voxel laws (1e4 cases)."""
    rng = np.random.default_rng(77)
    for _ in range(1000):
        d = int(rng.integers(2, 10))
        lam = float(rng.uniform(0.05, 8.0))
        f_inst = rng.normal(size=d).astype(np.float32)
        entries = []
        dense_entries = {}
        hyps = {}
        for v in range(int(rng.integers(1, 10))):
            key = (v, 0, 0)
            w_i = float(rng.integers(1, 25))
            hyps[key] = [(0, w_i)]
            if rng.random() < 0.7:
                f_d = rng.normal(size=d).astype(np.float32)
                w_d = float(rng.integers(1, 40))
                dense_entries[key] = (f_d, w_d)
                entries.append((w_i, f_d, w_d))
            else:
                entries.append((w_i, None, 0.0))
        dense, layer = make_layers(dense_entries, hyps, {0: (f_inst, 1.0)})
        got = fuse_instance(layer.instances[0], dense, layer, lam)
        want, precision = two_stage_instance_fusion(entries, f_inst, lam)
        assert got.total_precision == pytest.approx(precision, rel=1e-9)
        err = np.linalg.norm(got.embedding.astype(np.float64) - want)
        assert err <= 1e-6 * max(np.linalg.norm(want), 1e-9)

    checked = 0
    for _ in range(10_000):
        d = int(rng.integers(1, 6))
        f_d = rng.normal(size=d).astype(np.float32)
        f_i = rng.normal(size=d).astype(np.float32)
        w_d = float(rng.uniform(0, 30))
        w_i = float(rng.uniform(0, 30))
        lam = float(rng.uniform(0.05, 20.0))
        if w_d + lam * w_i <= 0:
            continue
        out = fuse_voxel(f_d, w_d, f_i, w_i, lam)
        assert np.all(out >= np.minimum(f_d, f_i) - 1e-5)
        assert np.all(out <= np.maximum(f_d, f_i) + 1e-5)
        if w_d == 0:
            assert np.array_equal(out, f_i)
        if w_i == 0:
            assert np.array_equal(out, f_d)
        alpha = float(rng.uniform(0.1, 10.0))
        scaled = fuse_voxel(f_d, alpha * w_d, f_i, alpha * w_i, lam)
        assert np.allclose(out, scaled, atol=1e-5)
        prev = None
        for lam_step in (0.1, 1.0, 10.0, 100.0):
            stepped = fuse_voxel(f_d, w_d, f_i, w_i, lam_step)
            dist = np.linalg.norm(stepped.astype(np.float64) - f_i.astype(np.float64))
            if prev is not None and w_i > 0:
                assert dist <= prev + 1e-6
            prev = dist
        checked += 1
    print(f"\nACCEPTANCE fusion-algebra: PASS (1000 closed-form, {checked} law cases)")


def test_fusion_benefit():
    """Default noise profile: fused layers beat raw in >= 8/10 seeds."""
    t0 = time.time()
    noise = synth.NoiseModel.profile("default")
    assert (noise.seg_split_prob, noise.seg_merge_prob) == (0.3, 0.1)
    assert (noise.patch_bleed, noise.embed_noise_sigma) == (0.3, 0.2)
    assert noise.crop_context_bleed == 0.2
    wins_instance = 0
    wins_dense = 0
    for seed in range(10):
        scene, traj = synth.orbit_scene(
            n_objects=8, seed=seed, dim=64, n_object_classes=6, n_frames=36
        )
        buf = io.BytesIO()
        gt, prompts = synth.generate_stream(
            scene, traj, synth.default_intrinsics(), noise, seed, buf
        )
        buf.seek(0)
        snap, _ = run_mapping(buf, MapConfig(), mode="global", seed=seed)
        fused_dense, fused_instances, _ = fuse_all(snap.dense, snap.instance, 1.0)
        m_inst = miou_of("instance", snap, gt, prompts)
        m_inst_f = miou_of("instance-fused", snap, gt, prompts,
                           fused_instances=fused_instances)
        m_dense = miou_of("dense", snap, gt, prompts)
        m_dense_f = miou_of("dense-fused", snap, gt, prompts, fused_dense=fused_dense)
        wins_instance += m_inst_f > m_inst
        wins_dense += m_dense_f >= m_dense - 0.01
    elapsed = time.time() - t0
    assert elapsed < 300.0, f"fusion benefit took {elapsed:.1f}s (budget 300s)"
    assert wins_instance >= 8, f"fused instance won only {wins_instance}/10"
    assert wins_dense >= 8, f"fused dense held in only {wins_dense}/10"
    print(f"\nACCEPTANCE fusion-benefit: PASS "
          f"(instance {wins_instance}/10, dense {wins_dense}/10, {elapsed:.1f}s)")


def test_sliding_window_consistency():
    """r_w=inf reproduces global fusion bit-exactly; r_w=6m within 0.03 mIoU."""
    # bit-exactness on one stream
    scene, traj = synth.corridor_scene(12.0, 0.8, seed=5, dim=64)
    buf = io.BytesIO()
    gt, prompts = synth.generate_stream(
        scene, traj, synth.default_intrinsics(),
        synth.NoiseModel.profile("default"), 5, buf,
    )
    buf.seek(0)
    snap_g, _ = run_mapping(buf, MapConfig(), mode="global", seed=5)
    buf.seek(0)
    snap_inf, _ = run_mapping(
        buf, MapConfig(window_radius=math.inf), mode="sliding-window", seed=5
    )
    _, fi_g, _ = fuse_all(snap_g.dense, snap_g.instance, 1.0)
    _, fi_inf, _ = fuse_all(snap_inf.dense, snap_inf.instance, 1.0)
    assert set(fi_g) == set(fi_inf)
    for iid in fi_g:
        assert np.array_equal(fi_g[iid].embedding, fi_inf[iid].embedding)
        assert fi_g[iid].total_precision == fi_inf[iid].total_precision

    # windowed mIoU vs global, 10-seed means on a 15 m scene
    sw_scores, global_scores = [], []
    for seed in range(10):
        scene, traj = synth.corridor_scene(15.0, 0.8, seed, dim=64)
        buf = io.BytesIO()
        gt, prompts = synth.generate_stream(
            scene, traj, synth.default_intrinsics(),
            synth.NoiseModel.profile("default"), seed, buf,
        )
        buf.seek(0)
        snap_g, _ = run_mapping(buf, MapConfig(), mode="global", seed=seed)
        _, fi, _ = fuse_all(snap_g.dense, snap_g.instance, 1.0)
        global_scores.append(
            miou_of("instance-fused", snap_g, gt, prompts, fused_instances=fi)
        )
        buf.seek(0)
        snap_sw, _ = run_mapping(
            buf, MapConfig(window_radius=6.0), mode="sliding-window", seed=seed
        )
        sw_scores.append(miou_of("instance-fused", snap_sw, gt, prompts))
    gap = abs(float(np.mean(sw_scores)) - float(np.mean(global_scores)))
    assert gap <= 0.03, f"sliding-window mIoU gap {gap:.4f} exceeds 0.03"
    print(f"\nACCEPTANCE sliding-window-consistency: PASS "
          f"(bit-exact at r_w=inf; mean gap {gap:.4f})")


def test_evidence_gating_ablation():
    """Disabling the evidence gate lowers mean fused-instance mIoU."""
    gated, ungated = [], []
    for seed in range(10):
        scene, traj = synth.corridor_scene(12.0, 0.8, seed, dim=64)
        buf = io.BytesIO()
        gt, prompts = synth.generate_stream(
            scene, traj, synth.default_intrinsics(),
            synth.NoiseModel.profile("split-heavy"), seed, buf,
        )
        for gating, scores in ((True, gated), (False, ungated)):
            buf.seek(0)
            cfg = MapConfig(window_radius=6.0, evidence_gating=gating)
            snap, _ = run_mapping(buf, cfg, mode="sliding-window", seed=seed)
            scores.append(miou_of("instance-fused", snap, gt, prompts))
    mean_gated = float(np.mean(gated))
    mean_ungated = float(np.mean(ungated))
    assert mean_ungated < mean_gated, (
        f"no-gating mean {mean_ungated:.4f} not below gated {mean_gated:.4f}"
    )
    print(f"\nACCEPTANCE evidence-gating-ablation: PASS "
          f"(gated {mean_gated:.4f} > ungated {mean_ungated:.4f})")


def test_memory_scaling():
    """Dense-global bytes near-linear in corridor length; windowed bytes bounded."""
    dense_bytes = {}
    sw_bytes = {}
    for length in (10.0, 20.0, 40.0):
        scene, traj = synth.corridor_scene(length, 0.8, seed=1, dim=64)
        buf = io.BytesIO()
        synth.generate_stream(
            scene, traj, synth.default_intrinsics(),
            synth.NoiseModel.profile("default"), 1, buf,
        )
        buf.seek(0)
        snap, rep = run_mapping(buf, MapConfig(), mode="global", seed=1)
        dense_bytes[length] = rep.memory["dense_bytes"]
        buf.seek(0)
        snap, rep = run_mapping(
            buf, MapConfig(window_radius=6.0), mode="sliding-window", seed=1
        )
        sw_bytes[length] = rep.memory["dense_bytes"]
    for length in (20.0, 40.0):
        ratio = dense_bytes[length] / dense_bytes[10.0]
        expected = length / 10.0
        assert expected / 1.25 <= ratio <= expected * 1.25, (
            f"global dense growth {ratio:.2f}x at {length}m vs linear {expected:.1f}x"
        )
    for length in (10.0, 20.0, 40.0):
        ratio = sw_bytes[length] / sw_bytes[10.0]
        assert 0.5 <= ratio <= 2.0, f"windowed dense bytes {ratio:.2f}x at {length}m"
    print(f"\nACCEPTANCE memory-scaling: PASS "
          f"(global 20m {dense_bytes[20.0]/dense_bytes[10.0]:.2f}x, "
          f"40m {dense_bytes[40.0]/dense_bytes[10.0]:.2f}x; "
          f"windowed max {max(sw_bytes[l]/sw_bytes[10.0] for l in sw_bytes):.2f}x)")


def test_metric_correctness():
    """Hand-computed 2-class case exact; brute-force parity on 100 volumes."""
    prompts = PromptSet(["alpha", "beta"], np.eye(2, dtype=np.float32))
    gt = {}
    preds = {}
    for i in range(10):
        gt[(i, 0, 0)] = 0
        preds[(i, 0, 0)] = 0
    for i in range(10):
        gt[(i, 1, 0)] = 1
        preds[(i, 1, 0)] = 1 if i < 5 else 0
    report = evaluate(preds, gt, prompts)
    assert report.per_class_iou["alpha"] == pytest.approx(10 / 15, abs=1e-12)
    assert report.per_class_iou["beta"] == pytest.approx(0.5, abs=1e-12)
    assert report.miou == pytest.approx((10 / 15 + 0.5) / 2, abs=1e-12)
    assert report.fmiou == pytest.approx(report.miou, abs=1e-12)
    assert report.acc == pytest.approx(0.75, abs=1e-12)

    rng = np.random.default_rng(99)
    for trial in range(100):
        n_classes = int(rng.integers(2, 6))
        labels = PromptSet(
            [f"c{i}" for i in range(n_classes)],
            np.eye(n_classes, dtype=np.float32),
            background_labels=frozenset({"c0"}) if trial % 2 == 0 else frozenset(),
        )
        gt = {}
        preds = {}
        for _ in range(int(rng.integers(10, 1000))):
            key = tuple(int(x) for x in rng.integers(0, 10, 3))
            gt[key] = int(rng.integers(0, n_classes))
            if rng.random() < 0.85:
                preds[key] = int(rng.integers(0, n_classes))
        exclude = trial % 2 == 0
        bg = set(labels.background_indices()) if exclude else set()
        if all(c in bg for c in gt.values()):
            continue
        report = evaluate(preds, gt, labels, exclude_background=exclude)
        miou, fmiou, acc, _ = confusion_metrics(preds, gt, n_classes, bg)
        assert report.miou == pytest.approx(miou, abs=1e-12)
        assert report.fmiou == pytest.approx(fmiou, abs=1e-12)
        assert report.acc == pytest.approx(acc, abs=1e-12)
    print("\nACCEPTANCE metric-correctness: PASS (hand case exact, 100 volumes)")


def test_hypothesis_cap():
    """10 overlapping instances never exceed K=3; eviction removes the minimum."""
    rng = np.random.default_rng(404)
    k_max = MapConfig().max_hypotheses
    layer = InstanceLayer(voxel_size=0.05, max_hypotheses=k_max)
    ids = []
    for i in range(10):
        prop = InstanceProposal(
            points=np.zeros((1, 3)),
            crop_embedding=np.ones(4, dtype=np.float32),
            voxel_counts={(100 + i, 0, 0): 1},
        )
        ids.append(layer.create_instance(prop))
    checked_evictions = 0
    for step in range(3000):
        key = (int(rng.integers(0, 3)), int(rng.integers(0, 3)), 0)
        iid = ids[int(rng.integers(len(ids)))]
        n = int(rng.integers(1, 7))
        before = {h.instance_id: h.count for h in layer.voxels.get(key, [])}
        layer.apply_match(
            InstanceProposal(
                points=np.zeros((n, 3)),
                crop_embedding=np.ones(4, dtype=np.float32),
                voxel_counts={key: n},
            ),
            iid,
        )
        after = {h.instance_id: h.count for h in layer.voxels[key]}
        assert len(after) <= k_max
        if iid not in before and len(before) == k_max:
            cands = dict(before)
            cands[iid] = float(n)
            victim = min(cands, key=lambda j: (cands[j], -j))
            assert victim not in after
            assert set(after) == set(cands) - {victim}
            checked_evictions += 1
    assert checked_evictions > 100
    print(f"\nACCEPTANCE hypothesis-cap: PASS "
          f"(3000 updates, {checked_evictions} evictions checked)")


def test_determinism():
    """Identical (stream, config, seed) produce byte-identical snapshots."""
    scene, traj = synth.orbit_scene(n_objects=5, seed=8, dim=64, n_frames=20)
    buf = io.BytesIO()
    synth.generate_stream(
        scene, traj, synth.default_intrinsics(),
        synth.NoiseModel.profile("default"), 8, buf,
    )
    raw = buf.getvalue()
    blobs = []
    for _ in range(2):
        snap, _ = run_mapping(
            io.BytesIO(raw), MapConfig(window_radius=6.0),
            mode="sliding-window", seed=8,
        )
        out = io.BytesIO()
        write_snapshot(out, snap)
        blobs.append(out.getvalue())
    assert blobs[0] == blobs[1]
    print(f"\nACCEPTANCE determinism: PASS (snapshot {len(blobs[0])} bytes, 2 runs)")
