"""Fitness-guided insertion campaign: seeds in, generated corpus plus fault report out."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import background_depth
from .config import CampaignConfig, config_to_dict
from .errors import ConfigError, Exhausted, NoGround, NoGroundTruth, SeedUnusable, SutFailure, TooSparse
from .fitness import fitness
from .geometry import Pose3
from .insertion import insert_objects
from .kitti_io import list_frame_ids, load_frame, save_frame
from .lidar import generate_rays
from .mesh import ObjectInstance, load_object_database, mesh_bounds
from .metrics import FD, LE, OM, average_precision, check_mr, evaluate_frame, modality_consistency
from .pose import check_collision, meshify_road, sample_pose, segment_ground
from .sut import BuiltinDetector, BuiltinParams, ExternalSut, stable_hash

log = logging.getLogger(__name__)

KINDS = (OM, FD, LE)


def substream(rng_seed: int, seed_id: str, insertion: int, trial: int) -> np.random.Generator:
    """Independent generator per (seed, insertion, trial); trial 0 picks the object."""
    key = (stable_hash(seed_id), int(insertion), int(trial))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(rng_seed), spawn_key=key))


def make_sut(cfg: CampaignConfig):
    if cfg.sut.kind == "external":
        return ExternalSut(cfg.sut.command, cfg.sut.timeout, cfg.image_format)
    return BuiltinDetector(BuiltinParams(**cfg.sut.params))


def _box3_dict(b):
    return None if b is None else {"center": list(b.center), "length": b.length, "width": b.width,
                                   "height": b.height, "yaw": b.yaw}


def _box2_dict(b):
    return None if b is None else [b.x_min, b.y_min, b.x_max, b.y_max]


def _fault_dict(f, ev):
    subj = ev.gts[f.subject[1]] if f.subject[0] == "gt" else ev.dets[f.subject[1]]
    return {"kind": f.kind, "subject": f.subject[0], "index": f.subject[1], "distance_m": f.distance,
            "score": f.score, "iou": f.iou, "box3": _box3_dict(subj.box3), "box2": _box2_dict(subj.box2)}


def _counts(faults) -> dict:
    c = {k: 0 for k in KINDS}
    for f in faults:
        c[f.kind] += 1
    return c


@dataclass
class SeedRecord:
    seed_id: str
    status: str = "ok"  # ok | no_insertion | unusable | sut_failure
    error: str = ""
    fitness_init: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    trials: list = field(default_factory=list)
    inserted: list = field(default_factory=list)
    mr: dict = field(default_factory=dict)
    seed_faults: dict = field(default_factory=dict)
    final_faults: list = field(default_factory=list)
    # kept in memory for corpus-level metrics, not serialized
    frame: object = None
    seed_eval: object = None
    final_eval: object = None

    @property
    def success(self) -> bool:
        return len(self.inserted) > 0

    @property
    def iterations(self) -> int:
        return len(self.trials)

    def as_dict(self) -> dict:
        return {"seed_id": self.seed_id, "status": self.status, "error": self.error,
                "fitness_init": self.fitness_init, "trace": self.trace, "trials": self.trials,
                "inserted": self.inserted, "mr": self.mr, "seed_faults": self.seed_faults,
                "final_faults": self.final_faults, "iterations": self.iterations}


@dataclass
class CampaignReport:
    config: dict
    seeds: list  # SeedRecord
    totals: dict

    def as_dict(self) -> dict:
        return {"config": self.config, "seeds": [s.as_dict() for s in self.seeds], "totals": self.totals}


class Campaign:
    """Holds the shared state of one run: object database, SUT, scan pattern."""

    def __init__(self, cfg: CampaignConfig, sut=None, database=None):
        self.cfg = cfg
        self.sut = sut if sut is not None else make_sut(cfg)
        if database is None:
            if not Path(cfg.objects_dir).is_dir():
                raise ConfigError(f"objects_dir {cfg.objects_dir} does not exist")
            database = load_object_database(cfg.objects_dir)
        if not database:
            raise ConfigError(f"no meshes found under {cfg.objects_dir}")
        self.db = database
        self.rays = generate_rays(cfg.lidar)
        self.local_boxes = [mesh_bounds(e.mesh, Pose3(0.0, 0.0, 0.0, 0.0)) for e in self.db]

    def pick_object(self, rng) -> int:
        """Uniform over meshes, or uniform over categories then meshes when stratified."""
        if self.cfg.object_sampling == "stratified":
            cats = sorted({e.category for e in self.db})
            cat = cats[int(rng.integers(len(cats)))]
            pool = [k for k, e in enumerate(self.db) if e.category == cat]
            return pool[int(rng.integers(len(pool)))]
        return int(rng.integers(len(self.db)))

    def evaluate(self, frame, dets):
        c = self.cfg
        # 2D-only detections get their distance from the splatted LiDAR depth under the box
        depth = background_depth(frame, c.camera.bg_radius_px) if any(d.box3 is None for d in dets) else None
        return evaluate_frame(frame.labels, dets, frame.id, c.tau, c.mode, c.category, depth_image=depth,
                              difficulty=c.difficulty)

    def run_seed(self, frame) -> SeedRecord:
        c = self.cfg
        rec = SeedRecord(frame.id)
        try:
            grid = segment_ground(frame.cloud, c.pose)
            surface = meshify_road(grid)
        except (NoGround, TooSparse) as e:
            rec.status, rec.error = "unusable", str(SeedUnusable(f"{frame.id}: {e}"))
            return rec
        try:
            seed_eval = self.evaluate(frame, self.sut.detect(frame))
        except SutFailure as e:
            rec.status, rec.error = "sut_failure", f"{type(e).__name__}: {e} {e.stderr}".strip()
            return rec
        best = fitness(seed_eval, c.fitness)
        rec.fitness_init = best.as_dict()
        rec.trace = [best.total]
        rec.seed_eval = seed_eval
        rec.seed_faults = _counts(seed_eval.faults)
        current, current_eval = frame, seed_eval
        bg = None
        for i in range(1, c.n_insertions + 1):
            pick = substream(c.rng_seed, frame.id, i, 0)
            k = self.pick_object(pick)
            entry = self.db[k]
            for trial in range(1, c.try_num + 1):
                rng = substream(c.rng_seed, frame.id, i, trial)
                row = {"insertion": i, "trial": trial, "mesh": entry.name}
                try:
                    cand = sample_pose(surface, self.local_boxes[k], rng, c.pose, frame.calib)
                except Exhausted:
                    rec.trials.append({**row, "outcome": "no_pose"})
                    continue
                if check_collision(cand, current, c.pose, grid) is not None:
                    rec.trials.append({**row, "outcome": "collision"})
                    continue
                inst = ObjectInstance(entry.mesh, entry.bvh, cand.pose, mesh_bounds(entry.mesh, cand.pose),
                                      entry.category)
                if bg is None:
                    bg = background_depth(current, c.camera.bg_radius_px)
                ins = insert_objects(current, [inst], rng, c.lidar, c.camera, self.rays, bg)
                if not ins.visible:
                    rec.trials.append({**row, "outcome": "invisible"})
                    continue
                try:
                    ev = self.evaluate(ins.frame, self.sut.detect(ins.frame))
                except SutFailure as e:
                    rec.status, rec.error = "sut_failure", f"{type(e).__name__}: {e} {e.stderr}".strip()
                    rec.inserted = []
                    return rec
                fit = fitness(ev, c.fitness)
                accept = fit.total > best.total if c.guidance == "guided" else True
                rec.trials.append({**row, "outcome": "accepted" if accept else "rejected",
                                   "fitness": fit.as_dict()})
                if not accept:
                    continue
                current, current_eval, best, bg = ins.frame, ev, fit, None
                rec.trace.append(fit.total)
                g = ins.new_labels[0]
                rec.inserted.append({
                    "mesh": entry.name, "category": entry.category, "insertion": i, "trial": trial,
                    "substream": [int(c.rng_seed), stable_hash(frame.id), i, trial],
                    "object_substream": [int(c.rng_seed), stable_hash(frame.id), i, 0],
                    "pose": {"x": cand.pose.x, "y": cand.pose.y, "z": cand.pose.z, "yaw": cand.pose.yaw},
                    "box3": _box3_dict(g.box3), "box2": _box2_dict(g.box2),
                    "carved_points": ins.n_carved, "object_points": len(ins.points),
                })
                break
        if not rec.success:
            rec.status = "no_insertion"
            return rec
        rec.frame, rec.final_eval = current, current_eval
        inserted_gts = [g for g in current.labels if g.box3 is not None and any(
            _box3_dict(g.box3) == d["box3"] for d in rec.inserted)]
        verdict = check_mr(seed_eval, current_eval, inserted_gts, c.tau,
                           c.ap_delta if c.mr_mode == "ap" else None)
        rec.mr = {"violated": verdict.violated, "new_faults": [_fault_dict(f, current_eval) for f in verdict.new_faults],
                  "new_counts": _counts(verdict.new_faults)}
        rec.final_faults = [_fault_dict(f, current_eval) for f in current_eval.faults]
        return rec


def fold_totals(records, mode: str = "3d") -> dict:
    """Corpus totals as a fold over per-seed records."""
    t = {"seeds": len(records), "usable": 0, "successful": 0, "sut_failures": 0, "accepted_insertions": 0,
         "iterations": 0, "mr_violations": 0, "new_faults": {k: 0 for k in KINDS},
         "seed_faults": {k: 0 for k in KINDS}, "final_faults": {k: 0 for k in KINDS}}
    for r in records:
        t["sut_failures"] += r.status == "sut_failure"
        if r.status in ("ok", "no_insertion"):
            t["usable"] += 1
            t["iterations"] += r.iterations
            for k in KINDS:
                t["seed_faults"][k] += r.seed_faults.get(k, 0)
        if r.success:
            t["successful"] += 1
            t["accepted_insertions"] += len(r.inserted)
            t["mr_violations"] += bool(r.mr.get("violated"))
            for k in KINDS:
                t["new_faults"][k] += r.mr["new_counts"][k]
            for f in r.final_faults:
                t["final_faults"][f["kind"]] += 1
    return t


def corpus_metrics(records, mode: str = "3d") -> dict:
    done = [r for r in records if r.success and r.seed_eval is not None]
    out = {"ap_before": None, "ap_after": None, "mc": None}
    if done:
        try:
            out["ap_before"] = average_precision([r.seed_eval.gts for r in done], [r.seed_eval.dets for r in done],
                                                 mode=mode)
            out["ap_after"] = average_precision([r.final_eval.gts for r in done], [r.final_eval.dets for r in done],
                                                mode=mode)
        except NoGroundTruth:
            pass
        items = [(g.box3, g.box2, r.frame.calib) for r in done for g in _inserted_gts(r)]
        if items:
            out["mc"] = modality_consistency(items)
    return out


def _inserted_gts(rec: SeedRecord):
    keys = [d["box3"] for d in rec.inserted]
    return [g for g in rec.frame.labels if g.box3 is not None and _box3_dict(g.box3) in keys]


def manifest_entries(records) -> list:
    out = []
    for r in records:
        if not r.success:
            continue
        out.append({"seed_id": r.seed_id, "frame_dir": f"generated/{r.seed_id}",
                    "calib": f"generated/{r.seed_id}/calib/{r.seed_id}.txt", "inserted": r.inserted})
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def persist_corpus(records, out_dir, image_format: str = "png", rng_seed: int = 0) -> dict:
    """Save generated frames in KITTI layout and write ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        if r.success:
            save_frame(out / "generated" / r.seed_id, r.frame, image_format)
    manifest = {"version": 1, "rng_seed": int(rng_seed), "frames": manifest_entries(records)}
    write_json(out / "manifest.json", manifest)
    return manifest


def load_seeds(cfg: CampaignConfig):
    ids = list_frame_ids(cfg.seeds_dir)
    if cfg.max_seeds is not None:
        ids = ids[:cfg.max_seeds]
    return ids


def run_campaign(cfg: CampaignConfig, sut=None, database=None, persist: bool = True,
                 seed_ids=None) -> CampaignReport:
    camp = Campaign(cfg, sut, database)
    ids = list(seed_ids) if seed_ids is not None else load_seeds(cfg)
    records = []
    for fid in ids:
        frame = load_frame(cfg.seeds_dir, fid)
        rec = camp.run_seed(frame)
        log.info("seed %s: %s, %d inserted, trace %s", fid, rec.status, len(rec.inserted),
                 [round(v, 4) for v in rec.trace])
        records.append(rec)
    totals = fold_totals(records, cfg.mode)
    totals.update(corpus_metrics(records, cfg.mode))
    report = CampaignReport(config_to_dict(cfg), records, totals)
    if persist:
        out = Path(cfg.output_dir)
        persist_corpus(records, out, cfg.image_format, cfg.rng_seed)
        rep = report.as_dict()
        # absolute paths would break byte-identical reruns into other directories
        for key in ("seeds_dir", "objects_dir", "output_dir"):
            rep["config"][key] = Path(rep["config"][key]).name
        write_json(out / "report.json", rep)
    return report
