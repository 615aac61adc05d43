"""Detection matching, fault taxonomy, R40 average precision, MR verdicts, modality consistency."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptySet, InconsistentGT, NoGroundTruth
from .geometry import Box2, Box3, GroundTruth, iou_2d, iou_3d, projected_box2

TAU = 0.5
SCORE_MIN = 0.5
R40 = np.arange(1, 41) / 40.0

OM, FD, LE = "ObjectMissing", "FalseDetection", "LocalizationError"


@dataclass(frozen=True)
class Detection:
    box3: Box3 | None = None
    box2: Box2 | None = None
    category: str = "Car"
    score: float = 1.0

    def __post_init__(self):
        if self.box3 is None and self.box2 is None:
            raise ValueError("a detection needs a 2D or a 3D box")
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (gt, det, iou)
    localization: list = field(default_factory=list)  # (gt, det, iou), 0 < iou <= tau
    unmatched_gts: list = field(default_factory=list)
    unmatched_dets: list = field(default_factory=list)
    ious: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (G, D) over all gts
    ignored_dets: list = field(default_factory=list)  # unmatched dets touching a DontCare region


@dataclass(frozen=True)
class FaultRecord:
    kind: str
    subject: tuple  # ("gt", index) or ("det", index)
    frame_id: str
    distance: float
    score: float | None = None
    iou: float | None = None


def _box(obj, mode):
    return obj.box3 if mode == "3d" else obj.box2


def pair_iou(a, b, mode: str) -> float:
    ba, bb = _box(a, mode), _box(b, mode)
    if ba is None or bb is None:
        return 0.0
    return iou_3d(ba, bb) if mode == "3d" else iou_2d(ba, bb)


def iou_matrix(gts, dets, mode: str = "3d") -> np.ndarray:
    m = np.zeros((len(gts), len(dets)))
    for i, g in enumerate(gts):
        for j, d in enumerate(dets):
            m[i, j] = pair_iou(g, d, mode)
    return m


def score_order(dets) -> list[int]:
    return sorted(range(len(dets)), key=lambda j: (-dets[j].score, j))


def match_detections(gts, dets, tau: float = TAU, mode: str = "3d") -> MatchResult:
    """Greedy matching by descending score; DontCare GTs never match."""
    mode = mode.lower()
    if mode not in ("2d", "3d"):
        raise ValueError(f"unknown mode {mode!r}")
    ious = iou_matrix(gts, dets, mode)
    care = [i for i, g in enumerate(gts) if not g.dont_care]
    free_gt = set(care)
    res = MatchResult(ious=ious)
    left_dets = []
    for j in score_order(dets):
        best, best_iou = -1, tau
        for i in care:
            if i in free_gt and ious[i, j] > best_iou:
                best, best_iou = i, ious[i, j]
        if best >= 0:
            res.pairs.append((best, j, float(best_iou)))
            free_gt.discard(best)
        else:
            left_dets.append(j)
    cand = [(ious[i, j], i, j) for i in sorted(free_gt) for j in left_dets if 0.0 < ious[i, j] <= tau]
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_d = set()
    for v, i, j in cand:
        if i in free_gt and j not in used_d:
            res.localization.append((i, j, float(v)))
            free_gt.discard(i)
            used_d.add(j)
    res.unmatched_gts = sorted(free_gt)
    dc = [i for i, g in enumerate(gts) if g.dont_care]
    for j in sorted(set(left_dets) - used_d):
        res.unmatched_dets.append(j)
        if dc and ious[dc, j].max() > 0.0:
            res.ignored_dets.append(j)
    return res


def _distance(obj, fallback=None) -> float:
    if obj.box3 is not None:
        return obj.box3.distance()
    return float("nan") if fallback is None else float(fallback)


def classify_faults(match: MatchResult, gts, dets, frame_id: str = "", score_min: float = SCORE_MIN,
                    det_depths=None) -> list[FaultRecord]:
    """OM: unmatched GT overlapping no detection. FD: confident detection overlapping no GT
    (DontCare included). LE: confident localization pair."""
    ious = match.ious
    out = []
    for i in match.unmatched_gts:
        if ious.shape[1] == 0 or ious[i].max() <= 0.0:
            out.append(FaultRecord(OM, ("gt", i), frame_id, _distance(gts[i])))
    for j in match.unmatched_dets:
        d = dets[j]
        if d.score >= score_min and (ious.shape[0] == 0 or ious[:, j].max() <= 0.0):
            fb = None if det_depths is None else det_depths[j]
            out.append(FaultRecord(FD, ("det", j), frame_id, _distance(d, fb), float(d.score)))
    for i, j, v in match.localization:
        if dets[j].score >= score_min:
            out.append(FaultRecord(LE, ("gt", i), frame_id, _distance(gts[i]), float(dets[j].score), v))
    return out


def box2_depth(box: Box2 | None, depth: np.ndarray) -> float:
    """Median known depth inside a 2D box; NaN if none."""
    if box is None:
        return float("nan")
    h, w = depth.shape
    c0, c1 = max(int(np.ceil(box.x_min)), 0), min(int(np.floor(box.x_max)), w - 1)
    r0, r1 = max(int(np.ceil(box.y_min)), 0), min(int(np.floor(box.y_max)), h - 1)
    if c1 < c0 or r1 < r0:
        return float("nan")
    v = depth[r0:r1 + 1, c0:c1 + 1]
    v = v[np.isfinite(v)]
    return float(np.median(v)) if len(v) else float("nan")


def select_category(items, category: str | None = "Car", keep_dont_care: bool = True):
    """Indices kept for evaluation: the category itself plus DontCare regions."""
    if category is None:
        return list(range(len(items)))
    keep = []
    for k, it in enumerate(items):
        if getattr(it, "dont_care", False):
            if keep_dont_care:
                keep.append(k)
        elif it.category == category:
            keep.append(k)
    return keep


@dataclass(frozen=True)
class Difficulty:
    """Optional KITTI-style difficulty gates; GTs outside them are evaluated as DontCare."""
    min_height_px: float | None = None
    max_truncation: float | None = None
    max_occlusion: int | None = None

    def admits(self, g) -> bool:
        if self.min_height_px is not None and (g.box2 is None or g.box2.height < self.min_height_px):
            return False
        if self.max_truncation is not None and g.truncation > self.max_truncation:
            return False
        return self.max_occlusion is None or g.occlusion <= self.max_occlusion


def apply_difficulty(gts, difficulty: Difficulty | None):
    if difficulty is None:
        return list(gts)
    return [g if g.dont_care or difficulty.admits(g) else replace(g, dont_care=True) for g in gts]


@dataclass
class FrameEval:
    frame_id: str
    mode: str
    gts: list
    dets: list
    match: MatchResult
    faults: list

    def counts(self) -> dict:
        c = {OM: 0, FD: 0, LE: 0}
        for f in self.faults:
            c[f.kind] += 1
        return c


def evaluate_frame(gts, dets, frame_id: str = "", tau: float = TAU, mode: str = "3d",
                   category: str | None = "Car", score_min: float = SCORE_MIN,
                   depth_image: np.ndarray | None = None, difficulty: Difficulty | None = None) -> FrameEval:
    gts = apply_difficulty([gts[k] for k in select_category(gts, category)], difficulty)
    dets = [dets[k] for k in select_category(dets, category, keep_dont_care=False)]
    m = match_detections(gts, dets, tau, mode)
    depths = None
    if depth_image is not None:
        depths = [box2_depth(d.box2, depth_image) if d.box3 is None else None for d in dets]
    return FrameEval(frame_id, mode, gts, dets, m, classify_faults(m, gts, dets, frame_id, score_min, depths))


# ---------------------------------------------------------------- average precision

def precision_recall(gts_per_frame, dets_per_frame, tau: float = TAU, mode: str = "3d"):
    n_gt = sum(1 for gts in gts_per_frame for g in gts if not g.dont_care)
    if n_gt == 0:
        raise NoGroundTruth("no ground-truth objects to evaluate against")
    scored = []  # (score, frame, det, is_tp)
    for f, (gts, dets) in enumerate(zip(gts_per_frame, dets_per_frame)):
        m = match_detections(gts, dets, tau, mode)
        tp = {j for _, j, _ in m.pairs}
        ignored = set(m.ignored_dets)
        for j, d in enumerate(dets):
            if j in ignored:
                continue
            scored.append((-d.score, f, j, j in tp))
    scored.sort()
    hits = np.array([s[3] for s in scored], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1.0)
    return precision, recall


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, levels=R40) -> float:
    if len(precision) == 0:
        return 0.0
    # running max from the right gives max precision at recall >= r
    pmax = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in levels:
        idx = np.nonzero(recall >= r - 1e-12)[0]
        total += pmax[idx[0]] if len(idx) else 0.0
    return float(total / len(levels))


def average_precision(gts_per_frame, dets_per_frame, tau: float = TAU, mode: str = "3d") -> float:
    """Pooled AP over frames, interpolated at forty recall levels."""
    if len(gts_per_frame) != len(dets_per_frame):
        raise ValueError("gts and dets must list the same frames")
    p, r = precision_recall(gts_per_frame, dets_per_frame, tau, mode)
    return interpolated_ap(p, r)


# ---------------------------------------------------------------- metamorphic relation

@dataclass
class MRVerdict:
    violated: bool
    new_faults: list
    ap_seed: float | None = None
    ap_mutated: float | None = None


def gt_key(g: GroundTruth):
    return (g.box3, g.box2 if g.box3 is None else None)


def _check_extends(seed: FrameEval, mutated: FrameEval, inserted) -> None:
    seed_keys = {gt_key(g) for g in seed.gts}
    ins_keys = {gt_key(g) for g in inserted}
    for g in mutated.gts:
        k = gt_key(g)
        if k in ins_keys:
            continue
        if k not in seed_keys and not g.dont_care:
            raise InconsistentGT(f"mutated label {g} is neither a seed label nor an insertion")
    mutated_keys = {gt_key(g) for g in mutated.gts}
    for g in seed.gts:
        if not g.dont_care and gt_key(g) not in mutated_keys:
            raise InconsistentGT(f"seed label {g} vanished from the mutated frame")


def _fault_keys(ev: FrameEval):
    keys = []
    for f in ev.faults:
        if f.subject[0] == "gt":
            keys.append((f.kind, gt_key(ev.gts[f.subject[1]])))
        else:
            keys.append((f.kind, ev.dets[f.subject[1]]))
    return keys


def check_mr(seed: FrameEval, mutated: FrameEval, inserted=(), tau: float = TAU,
             ap_delta: float | None = None) -> MRVerdict:
    """Violated iff the mutated frame shows a fault the seed frame did not.

    GT faults are keyed by label identity, so an undetected insertion is always
    new. A false detection is old when a seed false detection overlaps it above
    tau. With ``ap_delta`` set, the verdict is instead an AP drop above that
    margin.
    """
    _check_extends(seed, mutated, inserted)
    seed_keys = set()
    seed_fd = []
    for f, k in zip(seed.faults, _fault_keys(seed)):
        if f.kind == FD:
            seed_fd.append(seed.dets[f.subject[1]])
        else:
            seed_keys.add(k)
    new = []
    for f, k in zip(mutated.faults, _fault_keys(mutated)):
        if f.kind == FD:
            d = mutated.dets[f.subject[1]]
            if any(pair_iou(d, s, mutated.mode) > tau for s in seed_fd):
                continue
            new.append(f)
        elif k not in seed_keys:
            new.append(f)
    if ap_delta is None:
        return MRVerdict(bool(new), new)
    ap_s = _frame_ap(seed)
    ap_m = _frame_ap(mutated)
    return MRVerdict(ap_s - ap_m > ap_delta, new, ap_s, ap_m)


def _frame_ap(ev: FrameEval) -> float:
    try:
        return average_precision([ev.gts], [ev.dets], mode=ev.mode)
    except NoGroundTruth:
        return 1.0


# ---------------------------------------------------------------- modality consistency

def modality_consistency(items) -> float:
    """Mean IOU between rendered 2D boxes and bounds of the projected 3D box corners."""
    items = list(items)
    if not items:
        raise EmptySet("modality consistency needs at least one inserted object")
    vals = []
    for box3, box2, calib in items:
        proj = projected_box2(box3, calib)
        vals.append(0.0 if proj is None or box2 is None else iou_2d(box2, proj))
    return float(np.mean(vals))
