"""End-to-end acceptance checks.

Each test is one release gate and prints a single PASS/FAIL line.
Tolerances and runtime budgets are pinned here on purpose; loosening
them is a release decision, not a test fix.
"""
import time

import numpy as np
import pytest
import torch

from vcmpost.checkpoint import load_network, save_network
from vcmpost.cli import main as cli_main
from vcmpost.codec import measure_bitrate, mock_codec, mock_codec_yuv, quant_step
from vcmpost.codec import rgb_to_yuv420, yuv420_to_rgb
from vcmpost.data import (
    build_synthetic_dataset,
    group_by_frame,
    load_annotations,
    load_manifest,
    load_sequence,
    make_patch_pairs,
)
from vcmpost.detector import Detection, ToyBackend, detect
from vcmpost.frames import VideoSequence
from vcmpost.metrics import average_precision, evaluate_frames, iou
from vcmpost.net import NetConfig, build_network, forward, frame_to_tensor
from vcmpost.training import (
    LossConfig,
    OptimizerState,
    TrainConfig,
    TrainRun,
    feature_loss,
    feature_loss_torch,
    train,
)


def _verdict(number: int, ok: bool, detail: str) -> None:
    print(f"acceptance {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"acceptance {number} failed: {detail}"


# -- 1: metric oracle equivalence ------------------------------------


def _raster_iou(a, b):
    extent = int(max(max(a), max(b))) + 1
    ca = np.zeros((extent, extent), dtype=bool)
    cb = np.zeros((extent, extent), dtype=bool)
    ca[int(a[1]):int(a[3]), int(a[0]):int(a[2])] = True
    cb[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = True
    union = np.logical_or(ca, cb).sum()
    return 0.0 if union == 0 else float(np.logical_and(ca, cb).sum() / union)


def _greedy_flags(dets, gt_boxes, iou_thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    claimed = set()
    flags = [False] * len(dets)
    for i in order:
        best, best_j = 0.0, None
        ax0, ay0, ax1, ay1 = dets[i].box
        for j, (bx0, by0, bx1, by1) in enumerate(gt_boxes):
            if j in claimed:
                continue
            iw = min(ax1, bx1) - max(ax0, bx0)
            ih = min(ay1, by1) - max(ay0, by0)
            inter = max(iw, 0.0) * max(ih, 0.0)
            overlap = inter / ((ax1 - ax0) * (ay1 - ay0)
                               + (bx1 - bx0) * (by1 - by0) - inter)
            if overlap > best:
                best, best_j = overlap, j
        if best_j is not None and best >= iou_thr:
            flags[i] = True
            claimed.add(best_j)
    return flags


def _pr_enumeration_ap(dets, gt_boxes, iou_thr=0.5):
    """AP recomputed by enumerating one PR point per ranked prefix and
    integrating the max precision at recall >= r over distinct recalls."""
    if not gt_boxes:
        return None
    if not dets:
        return 0.0
    flags = _greedy_flags(dets, gt_boxes, iou_thr)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    points, tp = [], 0
    for rank, i in enumerate(order, start=1):
        tp += flags[i]
        points.append((tp / len(gt_boxes), tp / rank))
    area, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        area += (r - prev_r) * max(p for pr, p in points if pr >= r)
        prev_r = r
    return area


def test_criterion_1_metric_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(2024)

    worst_iou = 0.0
    for _ in range(1000):
        a0 = rng.integers(0, 24, 2)
        aw = rng.integers(1, 12, 2)
        b0 = rng.integers(0, 24, 2)
        bw = rng.integers(1, 12, 2)
        box_a = (float(a0[0]), float(a0[1]), float(a0[0] + aw[0]), float(a0[1] + aw[1]))
        box_b = (float(b0[0]), float(b0[1]), float(b0[0] + bw[0]), float(b0[1] + bw[1]))
        worst_iou = max(worst_iou, abs(iou(box_a, box_b) - _raster_iou(box_a, box_b)))

    worst_ap = 0.0
    compared = 0
    for _ in range(1000):
        n_dets = int(rng.integers(0, 11))
        n_gts = int(rng.integers(0, 6))
        dets, gts = [], {}
        for _ in range(n_dets):
            x0, y0 = rng.integers(0, 20, 2)
            w, h = rng.integers(1, 12, 2)
            dets.append(Detection(
                int(rng.integers(0, 3)),
                (float(x0), float(y0), float(x0 + w), float(y0 + h)),
                round(float(rng.uniform(0.05, 1.0)), 2),
            ))
        for _ in range(n_gts):
            x0, y0 = rng.integers(0, 20, 2)
            w, h = rng.integers(1, 12, 2)
            gts.setdefault(int(rng.integers(0, 3)), []).append(
                (float(x0), float(y0), float(x0 + w), float(y0 + h)))
        for c in range(3):
            c_dets = [d for d in dets if d.class_id == c]
            c_gts = gts.get(c, [])
            got = average_precision(c_dets, c_gts)
            want = _pr_enumeration_ap(c_dets, c_gts)
            if want is None:
                assert got is None
            else:
                worst_ap = max(worst_ap, abs(got - want))
                compared += 1

    elapsed = time.monotonic() - start
    ok = worst_ap <= 1e-9 and worst_iou <= 1e-6 and elapsed < 30.0
    _verdict(1, ok, f"AP err {worst_ap:.2e} (<=1e-9, {compared} cases), "
                    f"IoU err {worst_iou:.2e} (<=1e-6), {elapsed:.1f}s (<30s)")


# -- 2: loss and gradient correctness --------------------------------


def test_criterion_2_loss_and_gradients():
    start = time.monotonic()
    cfg = LossConfig(backend=ToyBackend())
    rng = np.random.default_rng(0)
    frame = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    zero_loss = feature_loss(frame, frame.copy(), cfg)

    config = NetConfig(base_width=16, growth=8, num_rrdb=1)
    net = build_network(config, seed=0).double()
    gen = torch.Generator().manual_seed(99)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.empty_like(p).uniform_(-0.02, 0.02, generator=gen))

    decoded = torch.from_numpy(
        rng.uniform(0.15, 0.85, (1, 3, 16, 16))).double()
    raw = torch.from_numpy(rng.uniform(0.1, 0.9, (1, 3, 16, 16))).double()
    backend = cfg.backend

    def loss_value():
        return feature_loss_torch(raw, net(decoded), backend)

    net.zero_grad(set_to_none=True)
    loss_value().backward()
    grads = [p.grad.detach().clone() for p in net.parameters()]

    h = 1e-6
    worst = 0.0
    params = list(net.parameters())
    coord_rng = np.random.default_rng(7)
    for _ in range(60):
        t = int(coord_rng.integers(len(params)))
        p = params[t]
        flat = int(coord_rng.integers(p.numel()))
        with torch.no_grad():
            orig = p.view(-1)[flat].item()
            p.view(-1)[flat] = orig + h
            up = loss_value().item()
            p.view(-1)[flat] = orig - h
            down = loss_value().item()
            p.view(-1)[flat] = orig
        fd = (up - down) / (2 * h)
        ag = grads[t].view(-1)[flat].item()
        rel = abs(fd - ag) / max(abs(fd), abs(ag), 1e-8)
        worst = max(worst, rel)

    # whole-gradient check via one random direction
    dir_gen = torch.Generator().manual_seed(5)
    direction = [torch.empty_like(p).uniform_(-1, 1, generator=dir_gen)
                 for p in params]
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(h * d)
        up = loss_value().item()
        for p, d in zip(params, direction):
            p.sub_(2 * h * d)
        down = loss_value().item()
        for p, d in zip(params, direction):
            p.add_(h * d)
    fd_dir = (up - down) / (2 * h)
    ag_dir = sum(float((g * d).sum()) for g, d in zip(grads, direction))
    rel_dir = abs(fd_dir - ag_dir) / max(abs(fd_dir), abs(ag_dir), 1e-8)
    worst = max(worst, rel_dir)

    elapsed = time.monotonic() - start
    ok = zero_loss == 0.0 and worst <= 1e-3 and elapsed < 120.0
    _verdict(2, ok, f"loss(I,I)={zero_loss}, worst gradient rel err "
                    f"{worst:.2e} (<=1e-3), {elapsed:.1f}s (<2min)")


# -- 3: identity at init and checkpoint round trip -------------------


def test_criterion_3_identity_and_checkpoints(tmp_path):
    rng = np.random.default_rng(1)
    identity_ok = True
    for config, seed in [
        (NetConfig(base_width=16, growth=8, num_rrdb=1), 0),
        (NetConfig(base_width=32, growth=16, num_rrdb=2), 7),
        (NetConfig(), 3),
    ]:
        net = build_network(config, seed=seed)
        for _ in range(2):
            x = rng.uniform(0, 1, (24, 20, 3)).astype(np.float32)
            identity_ok &= np.array_equal(forward(net, x), x)

    net = build_network(NetConfig(base_width=16, growth=8, num_rrdb=1), seed=0)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    path = tmp_path / "net.ckpt"
    save_network(path, net)
    loaded = load_network(path)
    params_ok = all(torch.equal(a, b) for a, b in
                    zip(net.parameters(), loaded.parameters()))
    x = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    outputs_ok = np.array_equal(forward(net, x), forward(loaded, x))

    ok = identity_ok and params_ok and outputs_ok
    _verdict(3, ok, f"identity bit-exact: {identity_ok}, round-trip params "
                    f"equal: {params_ok}, outputs equal: {outputs_ok}")


# -- 4: mock codec rate-distortion sanity ----------------------------


def test_criterion_4_rate_distortion(natural_image):
    img8 = np.rint(natural_image.astype(np.float64) * 255.0).astype(np.float32) / 255.0
    seq = VideoSequence(img8[None], fps=30.0, name="nat")
    qps = (4, 10, 16, 22, 28, 34, 40, 46)
    mses, sizes = [], []
    for qp in qps:
        decoded, size = mock_codec(seq, qp)
        mses.append(float(np.mean((decoded.frames - seq.frames) ** 2)))
        sizes.append(size)
    lossless = mses[0] == 0.0 and quant_step(4) == 1
    mse_monotone = all(a <= b for a, b in zip(mses, mses[1:]))
    size_monotone = all(a >= b for a, b in zip(sizes, sizes[1:]))
    ok = lossless and mse_monotone and size_monotone
    _verdict(4, ok, f"QP4 lossless: {lossless}, MSE nondecreasing: "
                    f"{mse_monotone} {['%.2e' % m for m in mses]}, "
                    f"size nonincreasing: {size_monotone} {sizes}")


# -- 5: desk-scale end-to-end gap ------------------------------------


def test_criterion_5_end_to_end_gap(tmp_path):
    start = time.monotonic()
    manifest_path = build_synthetic_dataset(
        tmp_path / "data", frame_count=200, height=64, width=64, seed=0)
    manifest = load_manifest(manifest_path)
    entry = manifest.entries[0]
    raw_seq = load_sequence(entry.raw, fps=entry.fps)
    decoded_seq, _ = mock_codec_yuv(raw_seq, 40)

    from vcmpost.codec import write_y4m
    from vcmpost.data import save_manifest
    decoded_path = tmp_path / "data" / "decoded_qp40.y4m"
    write_y4m(decoded_path, decoded_seq)
    entry.decoded[40] = {"path": decoded_path, "size_bytes": 1}
    manifest = load_manifest(save_manifest(manifest_path, manifest))

    config = TrainConfig(
        net=NetConfig(base_width=16, growth=8, num_rrdb=1),
        lr=1e-3,
        batch_size=8,
        max_steps=2000,
        seed=0,
        checkpoint_every=2000,
        patch_size=48,
        out_dir=tmp_path / "train",
    )
    ckpt = train(config, manifest)
    net = load_network(ckpt)

    # fixed evaluation batch, untouched by training-step sampling
    decoded_on_disk = load_sequence(decoded_path, fps=entry.fps)
    pairs = make_patch_pairs(raw_seq, decoded_on_disk, patch_size=48,
                             count=8, seed=12345)
    cfg = LossConfig(backend=ToyBackend())
    loss_before = float(np.mean([
        feature_loss(p.raw_patch, p.decoded_patch, cfg) for p in pairs
    ]))
    loss_after = float(np.mean([
        feature_loss(p.raw_patch, forward(net, p.decoded_patch), cfg)
        for p in pairs
    ]))

    gts = load_annotations(entry.annotations, (raw_seq.width, raw_seq.height))
    per_frame_gts = group_by_frame(gts, raw_seq.frame_count)
    backend = ToyBackend()
    dec_dets = [detect(backend, decoded_on_disk.frames[i], conf_threshold=0.0)
                for i in range(decoded_on_disk.frame_count)]
    post_dets = [detect(backend, forward(net, decoded_on_disk.frames[i]),
                        conf_threshold=0.0)
                 for i in range(decoded_on_disk.frame_count)]
    _, dec_map, _ = evaluate_frames(dec_dets, per_frame_gts)
    _, post_map, _ = evaluate_frames(post_dets, per_frame_gts)

    elapsed = time.monotonic() - start
    halved = loss_after <= 0.5 * loss_before
    gap = post_map - dec_map
    ok = halved and gap >= 2.0 and elapsed < 900.0
    _verdict(5, ok, f"loss {loss_before:.5f} -> {loss_after:.5f} "
                    f"(ratio {loss_after / loss_before:.3f}, need <=0.5), "
                    f"mAP {dec_map:.2f} -> {post_map:.2f} "
                    f"(gap {gap:+.2f}, need >=+2), {elapsed:.0f}s (<900s)")


# -- 6: pipeline determinism -----------------------------------------


def test_criterion_6_pipeline_determinism(tmp_path):
    digests = []
    for run in ("one", "two"):
        root = tmp_path / run
        manifest = build_synthetic_dataset(root / "data", frame_count=12,
                                           height=64, width=64, seed=0)
        out = root / "out"
        assert cli_main(["prepare", str(manifest), "--qp", "34", "40",
                         "--out", str(out)]) == 0
        assert cli_main(["train", str(out / "manifest.json"),
                         "--steps", "100", "--checkpoint-every", "100",
                         "--patch-size", "48", "--lr", "1e-3",
                         "--out", str(out)]) == 0
        ckpt = out / "train" / "checkpoint_000100.ckpt"
        for qp in (34, 40):
            assert cli_main(["postprocess", str(ckpt),
                             str(out / "decoded" / f"rects_qp{qp}.y4m")]) == 0
        assert cli_main(["evaluate", str(out / "manifest.json"),
                         "--out", str(out)]) == 0
        assert cli_main(["report", str(out / "metrics.csv"),
                         "--out", str(out)]) == 0
        digests.append((out / "metrics.csv").read_bytes())
    ok = digests[0] == digests[1]
    _verdict(6, ok, f"metrics CSV byte-identical across two runs: {ok} "
                    f"({len(digests[0])} bytes)")


# -- 7: bitrate and colour conversion --------------------------------


def test_criterion_7_bitrate_and_color():
    kbps = measure_bitrate(1_000_000, 150, 30.0)
    exact = kbps == 1600.0

    # full-gamut sweep: every combination of 16 levels per channel,
    # laid out as 2x2 uniform blocks so 4:2:0 chroma stays per-colour
    levels = np.linspace(0, 255, 16).round().astype(np.float64) / 255.0
    colors = np.stack(np.meshgrid(levels, levels, levels,
                                  indexing="ij"), axis=-1).reshape(-1, 3)
    grid = colors.reshape(64, 64, 3)
    frame = np.repeat(np.repeat(grid, 2, axis=0), 2, axis=1).astype(np.float32)
    back = yuv420_to_rgb(rgb_to_yuv420(frame))
    worst = float(np.abs(back.astype(np.float64) - frame.astype(np.float64)).max())
    bounded = worst <= 2.0 / 255.0 + 1e-9

    ok = exact and bounded
    _verdict(7, ok, f"1,000,000 B / 150 frames / 30 fps = {kbps} kbps "
                    f"(exact: {exact}), round-trip max err {worst * 255:.3f}/255 "
                    f"(<=2/255: {bounded})")
