"""End-to-end orchestration: synth -> label -> score -> prototypes -> refine -> eval.

Every stage can run in memory (:func:`run_pipeline`) or from a work
directory written by the previous stage (the ``stage_*`` functions used by
the CLI). Both paths go through the same per-stage helpers and produce the
same files. Work directory layout::

    sequences/<id>/         frames and poses
    gt/<id>.jsonl           ground truth of objects with enough points
    labels/<id>.jsonl       multi-frame labels (ego frame of each label's frame)
    clusters/<id>/          cluster points of each label, same order
    single/labels, single/clusters   the n = 0 baseline, when enabled
    scored/<id>.jsonl       labels with css (single/scored for the baseline)
    protos/                 prototype set pooled over all sequences
    refined/<id>.jsonl      refined labels
    metrics.json, metrics.csv
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scene_io
from .cbr import CbrConfig, refine_labels
from .cproto import CProtoConfig, build_cproto_set, read_cproto_set, write_cproto_set
from .css import CssConfig, css_components
from .cst import CstConfig
from .errors import ConfigError, ProtolabelError, StageError
from .evaluation import average_precision, best_iou, evaluate, spearman
from .mfc import MfcConfig, run_mfc
from .scene_io import Sequence
from .synth import SynthConfig, generate_scene

log = logging.getLogger("protolabel")


@dataclass
class EvalConfig:
    thresholds: tuple = (0.3, 0.5, 0.7)
    mode: str = "bev"
    # ground-truth objects hit by fewer points over the whole sequence are not scored
    min_gt_points: int = 5
    per_class: bool = False
    compare_single_frame: bool = True

    def __post_init__(self):
        self.thresholds = tuple(sorted(float(t) for t in self.thresholds))
        if not self.thresholds or any(not 0.0 < t <= 1.0 for t in self.thresholds):
            raise ConfigError("eval.thresholds must be IoU values in (0, 1]")
        if self.mode not in ("bev", "3d"):
            raise ConfigError("eval.mode must be 'bev' or '3d'")
        if self.min_gt_points < 0:
            raise ConfigError("eval.min_gt_points must be >= 0")

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "mode": self.mode,
            "min_gt_points": self.min_gt_points,
            "per_class": self.per_class,
            "compare_single_frame": self.compare_single_frame,
        }


_SECTIONS = {
    "synth": SynthConfig,
    "mfc": MfcConfig,
    "css": CssConfig,
    "cproto": CProtoConfig,
    "cbr": CbrConfig,
    "cst": CstConfig,
    "eval": EvalConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    num_sequences: int = 20
    synth: SynthConfig = field(default_factory=SynthConfig)
    mfc: MfcConfig = field(default_factory=MfcConfig)
    css: CssConfig = field(default_factory=CssConfig)
    cproto: CProtoConfig = field(default_factory=CProtoConfig)
    cbr: CbrConfig = field(default_factory=CbrConfig)
    cst: CstConfig = field(default_factory=CstConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in _SECTIONS:
                section = _SECTIONS[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                try:
                    if hasattr(section, "from_dict"):
                        kwargs[key] = section.from_dict(value)
                    else:
                        kwargs[key] = section(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {key} config: {exc}") from None
            else:
                kwargs[key] = value
        out = cls(**kwargs)
        try:
            out.seed = int(out.seed)
            out.num_sequences = int(out.num_sequences)
        except (TypeError, ValueError):
            raise ConfigError("seed and num_sequences must be integers") from None
        if out.num_sequences < 1:
            raise ConfigError("num_sequences must be >= 1")
        if not 0 <= out.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return out

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(scene_io.load_json(path))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_sequences": self.num_sequences,
            **{k: getattr(self, k).to_dict() for k in _SECTIONS},
        }


def sequence_seed(seed: int, i: int) -> int:
    """Independent 32-bit synth seed for sequence ``i`` of a run."""
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def sequence_name(i: int) -> str:
    return f"seq{i:04d}"


def log_stage(stage: str, **fields):
    log.info(json.dumps({"stage": stage, **fields}, sort_keys=True, default=str))


@dataclass
class SequenceOutput:
    seq_id: str
    sequence: Sequence
    gt: list
    labels: list
    clusters: list
    scored: list = None
    components: list = None
    single_labels: list = None
    single_clusters: list = None
    single_frame: list = None  # scored baseline labels
    refined: list = None
    flags: list = None
    stats: dict = field(default_factory=dict)


# -- per-stage helpers shared by the in-memory and on-disk paths ------------------


def synth_sequence(config: PipelineConfig, i: int):
    """Sequence ``i`` of the run and its scorable ground truth."""
    synth_cfg = SynthConfig.from_dict({**config.synth.to_dict(), "seed": sequence_seed(config.seed, i)})
    seq, gt = generate_scene(synth_cfg)
    seq = Sequence(sequence_name(i), seq.frames)
    gt_labels = gt.visible_labels(config.eval.min_gt_points, [f.index for f in seq.frames])
    return seq, gt_labels


def label_sequence(config: PipelineConfig, seq: Sequence):
    """Multi-frame labels and, if enabled, the single-frame baseline.

    Returns:
        ``(labels, clusters, single_labels, single_clusters, stats)``; the
        baseline entries are ``None`` when it is disabled.
    """
    mfc_cfg = MfcConfig.from_dict({**config.mfc.to_dict(), "seed": config.seed})
    res = run_mfc(seq, mfc_cfg)
    single_labels = single_clusters = None
    if config.eval.compare_single_frame and mfc_cfg.n != 0:
        r0 = run_mfc(seq, MfcConfig.from_dict({**mfc_cfg.to_dict(), "n": 0}))
        single_labels, single_clusters = r0.labels, r0.clusters
    return res.labels, res.clusters, single_labels, single_clusters, res.stats


def score_with_components(labels, clusters, config: CssConfig):
    """css scores plus the ``(distance, mlo, size)`` parts of each label."""
    scored, comps = [], []
    for lab, pts in zip(labels, clusters):
        psi = css_components(lab.box, pts, lab.beta, config)
        s = float(sum(w * p for w, p in zip(config.weights, psi)))
        scored.append(lab.with_css(s))
        comps.append(psi)
    return scored, comps


def pooled_protos(outputs, config: CProtoConfig) -> list:
    """Prototypes of every sequence, in sequence order."""
    protos = []
    for so in outputs:
        poses = {f.index: f.pose for f in so.sequence.frames}
        protos.extend(build_cproto_set(so.scored, so.clusters, config, poses, so.seq_id))
    return protos


def refine_outputs(outputs, protos, config: CbrConfig) -> dict:
    """Fill ``refined`` and ``flags`` on every output; returns flag counts."""
    counts = {}
    for so in outputs:
        if protos:
            so.refined, so.flags = refine_labels(so.scored, so.clusters, protos, config, return_flags=True)
        else:
            so.refined, so.flags = list(so.scored), ["no_prototype"] * len(so.scored)
        for f in so.flags:
            counts[f] = counts.get(f, 0) + 1
    return dict(sorted(counts.items()))


def _keys(seq_outputs, attr):
    keys = []
    for so in seq_outputs:
        keys.extend((so.seq_id, lab.frame_index) for lab in getattr(so, attr))
    return keys


def _concat(seq_outputs, attr):
    out = []
    for so in seq_outputs:
        out.extend(getattr(so, attr))
    return out


def css_fidelity(scored, components, gts, pred_keys, gt_keys, thresholds, mode="bev") -> dict:
    """How well css ranks labels by their true IoU, compared with distance alone."""
    iou = best_iou(scored, gts, mode, pred_keys, gt_keys)
    css = [lab.css for lab in scored]
    dist = [c[0] for c in components]
    out = {
        "spearman_css": spearman(css, iou),
        "spearman_distance": spearman(dist, iou),
        "ap_css": {},
        "ap_distance": {},
    }
    for t in thresholds:
        out["ap_css"][f"{t:g}"] = average_precision(scored, gts, t, mode, css, pred_keys, gt_keys)
        out["ap_distance"][f"{t:g}"] = average_precision(scored, gts, t, mode, dist, pred_keys, gt_keys)
    return out


def compute_metrics(config: PipelineConfig, outputs, num_protos: int, flag_counts: dict):
    """Metrics dictionary and CSV rows for the stages present in ``outputs``."""
    ev = config.eval
    gts, gk = _concat(outputs, "gt"), _keys(outputs, "gt")
    metrics = {"config": config.to_dict(), "stages": {}}
    rows = []
    for name, attr in (("mfc", "scored"), ("refined", "refined"), ("single_frame", "single_frame")):
        if any(getattr(so, attr) is None for so in outputs):
            continue
        preds = _concat(outputs, attr)
        rep = evaluate(preds, gts, ev.thresholds, ev.mode, ev.per_class, _keys(outputs, attr), gk)
        metrics["stages"][name] = rep.to_dict()
        rows.extend(rep.csv_rows(name))
    metrics["css_fidelity"] = css_fidelity(
        _concat(outputs, "scored"),
        _concat(outputs, "components"),
        gts,
        _keys(outputs, "scored"),
        gk,
        ev.thresholds,
        ev.mode,
    )
    metrics["prototypes"] = num_protos
    metrics["refine_flags"] = dict(flag_counts)
    metrics["sequences"] = [so.seq_id for so in outputs]
    return metrics, rows


# -- in-memory run ------------------------------------------------------------------


def _process_sequence(args):
    """Stages up to css scoring for one synthetic sequence (runs in a worker)."""
    config, i = args
    t0 = time.perf_counter()
    seq, gt = synth_sequence(config, i)
    labels, clusters, s_labels, s_clusters, stats = label_sequence(config, seq)
    so = SequenceOutput(seq.id, seq, gt, labels, clusters, single_labels=s_labels, single_clusters=s_clusters)
    so.scored, so.components = score_with_components(labels, clusters, config.css)
    if s_labels is not None:
        so.single_frame, _ = score_with_components(s_labels, s_clusters, config.css)
    so.stats = dict(stats, seconds=round(time.perf_counter() - t0, 3))
    return so


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_pipeline(config: PipelineConfig, out_dir=None, jobs: int = 1) -> dict:
    """Run every stage on ``config.num_sequences`` synthetic sequences.

    With ``out_dir`` set, every intermediate artifact is written below it.
    Returns the metrics dictionary (identical to ``metrics.json``).
    """
    t_start = time.perf_counter()
    outputs = _map(_process_sequence, [(config, i) for i in range(config.num_sequences)], jobs)
    for so in outputs:
        log_stage("label+score", sequence=so.seq_id, **so.stats)
    protos = pooled_protos(outputs, config.cproto)
    log_stage("proto", prototypes=len(protos))
    flag_counts = refine_outputs(outputs, protos, config.cbr)
    log_stage("refine", **flag_counts)
    metrics, rows = compute_metrics(config, outputs, len(protos), flag_counts)
    log_stage("eval", **{k: v["recall"] for k, v in metrics["stages"].items()})
    if out_dir is not None:
        out = Path(out_dir)
        for so in outputs:
            _write_sequence_artifacts(out, so)
        _guard("proto", out / "protos", lambda: write_cproto_set(protos, out / "protos"))
        _write_metrics(out, metrics, rows)
    log_stage("run", seconds=round(time.perf_counter() - t_start, 3))
    return metrics


# -- on-disk stages -------------------------------------------------------------------


def _guard(stage: str, path, fn):
    """Run ``fn``; any I/O or data error becomes a StageError naming ``stage``."""
    try:
        return fn()
    except StageError:
        raise
    except (OSError, ProtolabelError) as exc:
        where = getattr(exc, "path", None) or getattr(exc, "filename", None) or path
        raise StageError(stage, str(exc), where) from exc


def _write_sequence_artifacts(out: Path, so: SequenceOutput):
    sid = so.seq_id
    _guard("synth", out / "sequences" / sid, lambda: scene_io.write_sequence(so.sequence, out / "sequences" / sid))
    _guard("synth", out / "gt", lambda: scene_io.write_labels(so.gt, out / "gt" / f"{sid}.jsonl"))
    _write_label_set(out, "label", "labels", sid, so.labels, so.clusters)
    if so.single_labels is not None:
        _write_label_set(out, "label", "single/labels", sid, so.single_labels, so.single_clusters)
        _guard("score", out, lambda: scene_io.write_labels(so.single_frame, out / "single" / "scored" / f"{sid}.jsonl"))
    _guard("score", out, lambda: scene_io.write_labels(so.scored, out / "scored" / f"{sid}.jsonl"))
    _guard("refine", out, lambda: scene_io.write_labels(so.refined, out / "refined" / f"{sid}.jsonl"))


def _write_label_set(out: Path, stage, subdir, sid, labels, clusters):
    base = out / subdir
    clusters_dir = base.parent / "clusters" / sid

    def write():
        scene_io.write_labels(labels, base / f"{sid}.jsonl")
        scene_io.write_clusters(clusters, clusters_dir)

    _guard(stage, base, write)


def _write_metrics(out: Path, metrics, rows):
    def write():
        scene_io.dump_json(metrics, out / "metrics.json")
        write_csv(rows, out / "metrics.csv")

    _guard("eval", out / "metrics.json", write)


def _sequence_ids(out: Path) -> list:
    root = out / "sequences"
    ids = sorted(p.parent.name for p in root.glob("*/manifest.json"))
    if not ids:
        raise StageError("load", "no sequences found; run the synth stage first", root)
    return ids


def _read_labels_and_clusters(out: Path, subdir: str, sid: str, stage: str):
    clusters_root = (out / subdir).parent / "clusters"

    def read():
        labels = scene_io.read_labels(out / subdir / f"{sid}.jsonl")
        return labels, scene_io.read_clusters(clusters_root / sid, len(labels))

    return _guard(stage, out / subdir / f"{sid}.jsonl", read)


def _load_outputs(out: Path, stage: str, need: tuple) -> list:
    """Rebuild per-sequence outputs from the work directory.

    ``need`` names what to load: any of ``labels``, ``scored``, ``single``,
    ``refined``. Clusters always come with the labels they belong to.
    """
    outputs = []
    for sid in _sequence_ids(out):
        seq = _guard(stage, out / "sequences" / sid, lambda: scene_io.read_sequence(out / "sequences" / sid))
        gt = _guard(stage, out / "gt", lambda: scene_io.read_labels(out / "gt" / f"{sid}.jsonl"))
        labels, clusters = _read_labels_and_clusters(out, "labels", sid, stage)
        so = SequenceOutput(sid, seq, gt, labels, clusters)
        if "scored" in need:
            so.scored = _guard(stage, out / "scored", lambda: scene_io.read_labels(out / "scored" / f"{sid}.jsonl"))
        if "single" in need and (out / "single" / "labels" / f"{sid}.jsonl").is_file():
            so.single_labels, so.single_clusters = _read_labels_and_clusters(out, "single/labels", sid, stage)
            scored_path = out / "single" / "scored" / f"{sid}.jsonl"
            if "scored" in need and scored_path.is_file():
                so.single_frame = _guard(stage, scored_path, lambda: scene_io.read_labels(scored_path))
        if "refined" in need:
            so.refined = _guard(stage, out / "refined", lambda: scene_io.read_labels(out / "refined" / f"{sid}.jsonl"))
        outputs.append(so)
    return outputs


def stage_synth(config: PipelineConfig, out_dir) -> list:
    """Generate the run's sequences and ground truth; returns the sequence ids."""
    out = Path(out_dir)
    ids = []
    for i in range(config.num_sequences):
        seq, gt = synth_sequence(config, i)
        _guard("synth", out / "sequences" / seq.id, lambda: scene_io.write_sequence(seq, out / "sequences" / seq.id))
        _guard("synth", out / "gt", lambda: scene_io.write_labels(gt, out / "gt" / f"{seq.id}.jsonl"))
        ids.append(seq.id)
    log_stage("synth", sequences=len(ids))
    return ids


def _label_one(args):
    config, out, sid = args
    seq = _guard("label", out / "sequences" / sid, lambda: scene_io.read_sequence(out / "sequences" / sid))
    t0 = time.perf_counter()
    labels, clusters, s_labels, s_clusters, stats = label_sequence(config, seq)
    _write_label_set(out, "label", "labels", sid, labels, clusters)
    if s_labels is not None:
        _write_label_set(out, "label", "single/labels", sid, s_labels, s_clusters)
    return sid, dict(stats, seconds=round(time.perf_counter() - t0, 3))


def stage_label(config: PipelineConfig, out_dir, jobs: int = 1):
    out = Path(out_dir)
    for sid, stats in _map(_label_one, [(config, out, sid) for sid in _sequence_ids(out)], jobs):
        log_stage("label", sequence=sid, **stats)


def stage_score(config: PipelineConfig, out_dir, dump_components=None):
    """Score labels (and the baseline, if present); optionally dump css parts as CSV."""
    out = Path(out_dir)
    rows = []
    for so in _load_outputs(out, "score", ("single",)):
        scored, comps = score_with_components(so.labels, so.clusters, config.css)
        _guard("score", out / "scored", lambda: scene_io.write_labels(scored, out / "scored" / f"{so.seq_id}.jsonl"))
        if so.single_labels is not None:
            single, _ = score_with_components(so.single_labels, so.single_clusters, config.css)
            path = out / "single" / "scored" / f"{so.seq_id}.jsonl"
            _guard("score", path, lambda: scene_io.write_labels(single, path))
        for lab, (d, m, s) in zip(scored, comps):
            rows.append(
                {"sequence": so.seq_id, "frame": lab.frame_index, "tau": lab.tau, "class": lab.beta.value,
                 "distance": d, "mlo": m, "size": s, "css": lab.css}
            )
        log_stage("score", sequence=so.seq_id, labels=len(scored))
    if dump_components is not None:
        _guard("score", dump_components, lambda: write_csv(rows, dump_components))


def stage_proto(config: PipelineConfig, out_dir) -> int:
    out = Path(out_dir)
    outputs = _load_outputs(out, "proto", ("scored",))
    protos = _guard("proto", out / "protos", lambda: pooled_protos(outputs, config.cproto))
    _guard("proto", out / "protos", lambda: write_cproto_set(protos, out / "protos"))
    log_stage("proto", prototypes=len(protos))
    return len(protos)


def stage_refine(config: PipelineConfig, out_dir, report=None) -> dict:
    """Refine scored labels with the stored prototypes; optionally write a per-label report."""
    out = Path(out_dir)
    outputs = _load_outputs(out, "refine", ("scored",))
    if not (out / "protos" / "index.json").is_file():
        raise StageError("refine", "prototype index missing; run the proto stage first", out / "protos" / "index.json")
    protos = _guard("refine", out / "protos", lambda: read_cproto_set(out / "protos"))
    counts = refine_outputs(outputs, protos, config.cbr)
    rows = []
    for so in outputs:
        _guard("refine", out / "refined", lambda: scene_io.write_labels(so.refined, out / "refined" / f"{so.seq_id}.jsonl"))
        for before, after, flag in zip(so.scored, so.refined, so.flags):
            b, a = before.box, after.box
            rows.append(
                {"sequence": so.seq_id, "frame": before.frame_index, "tau": before.tau, "flag": flag,
                 "dl": a.l - b.l, "dw": a.w - b.w, "dh": a.h - b.h,
                 "shift": float(np.hypot(a.x - b.x, a.y - b.y))}
            )
    if report is not None:
        _guard("refine", report, lambda: write_csv(rows, report))
    log_stage("refine", **counts)
    return counts


def stage_eval(config: PipelineConfig, out_dir) -> dict:
    """Metrics over the stored labels; writes ``metrics.json`` and ``metrics.csv``.

    Refinement flags are not stored by the refine stage, so they are
    recounted here by repeating the (deterministic) refinement.
    """
    out = Path(out_dir)
    outputs = _load_outputs(out, "eval", ("scored", "single", "refined"))
    counts = {}
    for so in outputs:
        _, so.components = score_with_components(so.scored, so.clusters, config.css)
    protos = _guard("eval", out / "protos", lambda: read_cproto_set(out / "protos"))
    for so in outputs:
        if protos:
            _, flags = refine_labels(so.scored, so.clusters, protos, config.cbr, return_flags=True)
        else:
            flags = ["no_prototype"] * len(so.scored)
        for f in flags:
            counts[f] = counts.get(f, 0) + 1
    metrics, rows = compute_metrics(config, outputs, len(protos), dict(sorted(counts.items())))
    _write_metrics(out, metrics, rows)
    log_stage("eval", **{k: v["recall"] for k, v in metrics["stages"].items()})
    return metrics


def write_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
