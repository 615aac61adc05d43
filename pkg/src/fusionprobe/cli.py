"""Command line entry point: generate, evaluate, render, mc, selfcheck, dataset."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, FusionProbeError

EXIT_OK, EXIT_CONFIG, EXIT_SUT, EXIT_NO_SEEDS = 0, 2, 3, 4


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    if getattr(args, "guidance", None):
        out.append(f"guidance={args.guidance}")
    if getattr(args, "seed", None) is not None:
        out.append(f"rng_seed={args.seed}")
    if getattr(args, "output", None):
        out.append(f"output_dir={args.output}")
    return out


def cmd_generate(args) -> int:
    from .campaign import run_campaign
    from .config import load_config
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_campaign(cfg)
    t = report.totals
    print(json.dumps(t, indent=2, sort_keys=True))
    if t["sut_failures"]:
        for r in report.seeds:
            if r.status == "sut_failure":
                print(f"SUT failure on {r.seed_id}: {r.error}", file=sys.stderr)
        return EXIT_SUT
    if t["usable"] == 0:
        print("no usable seeds", file=sys.stderr)
        return EXIT_NO_SEEDS
    return EXIT_OK


def _read_dets(path: Path, calib):
    from .sut import parse_detections
    return parse_detections(path.read_text(), calib) if path.exists() else []


def evaluate_dirs(gt_root, det_root, tau: float = 0.5, mode: str = "3d") -> dict:
    """Score KITTI-style detection files against a labeled frame directory."""
    from .kitti_io import read_calib, read_labels, record_to_gt
    from .metrics import average_precision, evaluate_frame
    gt_root, det_root = Path(gt_root), Path(det_root)
    ids = sorted(p.stem for p in (gt_root / "label_2").glob("*.txt"))
    frames, all_g, all_d = [], [], []
    counts = {"ObjectMissing": 0, "FalseDetection": 0, "LocalizationError": 0}
    for fid in ids:
        calib = read_calib((gt_root / "calib" / f"{fid}.txt").read_text())
        gts = [record_to_gt(r, calib) for r in read_labels((gt_root / "label_2" / f"{fid}.txt").read_text())]
        det_file = det_root / f"{fid}.txt"
        if not det_file.exists():
            det_file = det_root / "label_2" / f"{fid}.txt"
        dets = _read_dets(det_file, calib)
        ev = evaluate_frame(gts, dets, fid, tau, mode)
        try:
            ap = average_precision([ev.gts], [ev.dets], tau, mode)
        except FusionProbeError:
            ap = None
        faults = [{"kind": f.kind, "distance_m": f.distance, "score": f.score,
                   "subject": f"{f.subject[0]}:{f.subject[1]}"} for f in ev.faults]
        for f in ev.faults:
            counts[f.kind] += 1
        frames.append({"id": fid, "faults": faults, "ap_frame": ap})
        all_g.append(ev.gts)
        all_d.append(ev.dets)
    try:
        ap = average_precision(all_g, all_d, tau, mode)
    except FusionProbeError:
        ap = None
    return {"frames": frames, "summary": {"ap": ap, "counts": counts, "tau": tau, "mode": mode}}


def cmd_evaluate(args) -> int:
    if args.mode not in ("2d", "3d"):
        print("mode must be 2d or 3d", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = evaluate_dirs(args.gt, args.det, args.tau, args.mode)
    except FusionProbeError as e:
        print(f"cannot evaluate: {e}", file=sys.stderr)
        return EXIT_SUT
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def manifest_mc(path) -> float:
    from .geometry import Box2, Box3
    from .kitti_io import read_calib
    from .metrics import modality_consistency
    path = Path(path)
    man = json.loads(path.read_text())
    items = []
    for fr in man["frames"]:
        calib = read_calib((path.parent / fr["calib"]).read_text())
        for ins in fr["inserted"]:
            b = ins["box3"]
            items.append((Box3(tuple(b["center"]), b["length"], b["width"], b["height"], b["yaw"]),
                          Box2(*ins["box2"]), calib))
    return modality_consistency(items)


def cmd_mc(args) -> int:
    try:
        mc = manifest_mc(args.manifest)
    except FusionProbeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps({"mc": mc}))
    return EXIT_OK


def cmd_render(args) -> int:
    from .camera import depth_to_png
    from .campaign import Campaign, substream
    from .config import load_config
    from .errors import Exhausted
    from .insertion import insert_objects
    from .kitti_io import load_frame, write_image, write_point_cloud
    from .mesh import ObjectInstance, mesh_bounds
    from .pose import check_collision, meshify_road, sample_pose, segment_ground
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    camp = Campaign(cfg)
    frame = load_frame(cfg.seeds_dir, args.frame)
    grid = segment_ground(frame.cloud, cfg.pose)
    surface = meshify_road(grid)
    k = camp.pick_object(substream(cfg.rng_seed, frame.id, 1, 0))
    entry = camp.db[k]
    for trial in range(1, cfg.try_num + 1):
        rng = substream(cfg.rng_seed, frame.id, 1, trial)
        try:
            cand = sample_pose(surface, camp.local_boxes[k], rng, cfg.pose, frame.calib)
        except Exhausted:
            continue
        if check_collision(cand, frame, cfg.pose, grid) is None:
            break
    else:
        print("no valid pose found", file=sys.stderr)
        return EXIT_NO_SEEDS
    inst = ObjectInstance(entry.mesh, entry.bvh, cand.pose, mesh_bounds(entry.mesh, cand.pose), entry.category)
    ins = insert_objects(frame, [inst], rng, cfg.lidar, cfg.camera, camp.rays)
    out = Path(args.out or cfg.output_dir) / "render"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{frame.id}_composite.png").write_bytes(write_image(ins.frame.image))
    (out / f"{frame.id}_depth.png").write_bytes(write_image(depth_to_png(ins.render.object_depth)))
    for j, m in enumerate(ins.render.masks):
        (out / f"{frame.id}_mask{j}.png").write_bytes(write_image(np.repeat(m[:, :, None] * np.uint8(255), 3, 2)))
    (out / f"{frame.id}_carved.bin").write_bytes(write_point_cloud(ins.frame.cloud))
    print(json.dumps({"out": str(out), "mesh": entry.name, "pose": [cand.pose.x, cand.pose.y, cand.pose.z,
                                                                     cand.pose.yaw]}))
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .synthetic import build_dataset
    info = build_dataset(args.out, args.seeds, args.objects, args.seed)
    print(json.dumps({"seeds": len(info["seeds"]), "objects": len(info["objects"]), "root": info["root"]}))
    return EXIT_OK


def selfcheck(root=None, n_seeds: int = 4, verbose: bool = True) -> dict:
    """Builtin-detector scenarios: fault-free run, seeded range fault, determinism."""
    from .campaign import run_campaign
    from .config import config_from_dict
    from .synthetic import build_dataset
    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(root or tmp)
        build_dataset(root, n_seeds=n_seeds, n_objects=4, seed=7)
        base = {"seeds_dir": str(root / "seeds"), "objects_dir": str(root / "objects")}
        clean = run_campaign(config_from_dict({**base, "output_dir": str(root / "clean")}))
        trace_ok = all(all(b > a for a, b in zip(r.trace, r.trace[1:])) for r in clean.seeds)
        results["guided traces strictly increase"] = trace_ok
        faulty_cfg = {**base, "sut": {"params": {"faults": [{"max_range": 25}]}}}
        runs = []
        for k in range(2):
            rep = run_campaign(config_from_dict({**faulty_cfg, "output_dir": str(root / f"run{k}" / "out")}))
            runs.append(rep)
        far_ok = True
        for r in runs[0].seeds:
            if not r.success:
                continue
            far = [d for d in r.inserted if np.linalg.norm(d["box3"]["center"]) > 25.0]
            if far and not r.mr["violated"]:
                far_ok = False
        results["range fault: far insertions violate the relation"] = far_ok
        same = all((root / f"run0/out/{n}").read_bytes() == (root / f"run1/out/{n}").read_bytes()
                   for n in ("report.json", "manifest.json"))
        results["identical reruns"] = same
    if verbose:
        for name, ok in results.items():
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return results


def cmd_selfcheck(args) -> int:
    res = selfcheck(n_seeds=args.seeds)
    return EXIT_OK if all(res.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusionprobe", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run an insertion campaign")
    g.add_argument("--config", required=True)
    g.add_argument("--guidance", choices=("guided", "random"))
    g.add_argument("--seed", type=int)
    g.add_argument("--output")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. pose.min_range=8")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="AP and fault taxonomy of detection files")
    e.add_argument("--gt", required=True)
    e.add_argument("--det", required=True)
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--mode", default="3d")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="debug images for one insertion")
    r.add_argument("--frame", required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("mc", help="modality consistency of a generated corpus")
    m.add_argument("--manifest", required=True)
    m.set_defaults(func=cmd_mc)

    s = sub.add_parser("selfcheck", help="builtin detector scenarios")
    s.add_argument("--seeds", type=int, default=4)
    s.set_defaults(func=cmd_selfcheck)

    d = sub.add_parser("dataset", help="write a synthetic seed corpus and object database")
    d.add_argument("--out", required=True)
    d.add_argument("--seeds", type=int, default=50)
    d.add_argument("--objects", type=int, default=20)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_dataset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
