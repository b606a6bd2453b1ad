"""Operator entry points: full runs, single stages, simulation, debugging.

Exit status: 0 success, 1 validation error (bad flags, bad config, bad
inputs), 2 runtime failure (detector crash, aborted round).
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import balance, cde, obc, pipeline, proto, sim
from .cloud import (
    PROVENANCE_SOURCE_GT,
    PROVENANCE_TARGET_PSEUDO,
    FrameManifest,
    LabelSet,
    ManifestEntry,
    crop_entry,
    read_labels,
    read_manifest,
    read_points,
    write_labels,
    write_manifest,
    write_points,
)
from .geom import Box3D, bev_iou, iou_3d
from .util import derive_rng

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_box(text: str) -> Box3D:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 7:
        raise _UsageError(f"expected cx,cy,cz,w,l,h,yaw - got {len(parts)} fields")
    return Box3D(*parts)


def _detector_from_args(args) -> proto.DetectorHandle:
    if not args.detector:
        raise _UsageError("--detector COMMAND is required for this stage")
    return proto.launch_detector(shlex.split(args.detector), timeout=args.timeout)


def build_parser() -> _Parser:
    parser = _Parser(prog="redb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full labeling/training loop")
    p_run.add_argument("--config", required=True, help="key=value config file")
    p_run.add_argument("--seed", type=int, default=None, help="override master seed")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.add_argument("--jobs", type=int, default=None, help="detector handle pool size")

    p_cde = sub.add_parser("cde", help="examine pseudo labels against source scenes")
    p_cde.add_argument("--target-manifest", required=True)
    p_cde.add_argument("--source-manifest", required=True)
    p_cde.add_argument("--detector", required=True, help="endpoint command line")
    p_cde.add_argument("--out", required=True)
    p_cde.add_argument("--delta-cde", type=float, default=0.6)
    p_cde.add_argument("--delta-pos", type=float, default=0.6)
    p_cde.add_argument("--seed", type=int, default=0)
    p_cde.add_argument("--timeout", type=float, default=proto.DEFAULT_TIMEOUT)

    p_obc = sub.add_parser("obc", help="count overlapped boxes and draw the diverse subset")
    p_obc.add_argument("--target-manifest", required=True)
    p_obc.add_argument("--detector", required=True)
    p_obc.add_argument("--out", required=True)
    p_obc.add_argument("--delta-pos", type=float, default=0.6)
    p_obc.add_argument("--delta-obc", type=float, default=0.3)
    p_obc.add_argument("--d", type=float, default=5.0)
    p_obc.add_argument("--seed", type=int, default=0)
    p_obc.add_argument("--timeout", type=float, default=proto.DEFAULT_TIMEOUT)

    p_sample = sub.add_parser("sample", help="class-balanced injection into target frames")
    p_sample.add_argument("--target-manifest", required=True,
                          help="frames to augment (labels used as existing boxes)")
    p_sample.add_argument("--source-manifest", required=True, help="labeled object source")
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--s-r", type=int, default=5)
    p_sample.add_argument("--s-g", type=int, default=10)
    p_sample.add_argument("--num-classes", type=int, default=3)
    p_sample.add_argument("--ros", default="0.75,1.25")
    p_sample.add_argument("--seed", type=int, default=0)

    p_gen = sub.add_parser("sim-gen", help="write a synthetic dataset")
    p_gen.add_argument("--spec", required=True, help="domain spec file")
    p_gen.add_argument("--out", required=True)

    p_mock = sub.add_parser("mock-detector",
                            help="serve the built-in mock detector on stdio")
    p_mock.add_argument("--spec", default=None, help="mock detector spec file")
    p_mock.add_argument("--no-prenms", action="store_true")
    p_mock.add_argument("--no-train", action="store_true")

    p_eval = sub.add_parser("eval", help="precision/recall of labels against truth")
    p_eval.add_argument("--pred-manifest", required=True)
    p_eval.add_argument("--truth-manifest", required=True)
    p_eval.add_argument("--iou", type=float, default=0.5)

    p_iou = sub.add_parser("iou", help="BEV and 3D IoU of two boxes")
    p_iou.add_argument("--a", required=True, help='"cx,cy,cz,w,l,h,yaw"')
    p_iou.add_argument("--b", required=True)

    return parser


def _cmd_run(args) -> int:
    config = pipeline.load_config(args.config, seed=args.seed, out_dir=args.out,
                                  pool_size=args.jobs)
    reports = pipeline.run(config)
    for r in reports:
        print(f"round {r.round_index} epoch {r.epoch}: raw={r.raw_pseudo} "
              f"kept={r.cde_kept} red={r.red_size}")
    return EXIT_OK


def _load_pseudo_entries(manifest, detector, delta_pos):
    """Infer every frame and crop its confident boxes into bank entries."""
    states = []
    for m in manifest:
        points = read_points(m.points_path)
        result = detector.infer(m.frame_id, points, points_path=m.points_path)
        confident = proto.filter_confident(result, delta_pos)
        entries = [crop_entry(points, b, PROVENANCE_TARGET_PSEUDO, m.frame_id)
                   for b in confident.boxes]
        states.append((m, points, result, confident, entries))
    return states


def _cmd_cde(args) -> int:
    target = read_manifest(args.target_manifest)
    source = read_manifest(args.source_manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _detector_from_args(args) as detector:
        states = _load_pseudo_entries(target, detector, args.delta_pos)
        entries_by_frame = {m.frame_id: entries for m, _, _, _, entries in states}
        cfg = cde.CdeConfig(delta_cde=args.delta_cde, delta_pos=args.delta_pos,
                            rng_seed=args.seed)
        outcome = cde.examine(entries_by_frame, source, detector, cfg,
                              scene_dir=out / "cde_scenes")
    cde.write_verdicts(out / "cde_verdicts.txt", outcome.verdicts)
    kept = sum(len(v) for v in outcome.kept_by_frame.values())
    total = len(outcome.verdicts)
    print(f"examined {total} pseudo boxes, kept {kept} "
          f"({outcome.unexamined} unexamined)")
    return EXIT_OK


def _cmd_obc(args) -> int:
    target = read_manifest(args.target_manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = obc.ObcConfig(delta_obc=args.delta_obc, d=args.d, rng_seed=args.seed)
    with _detector_from_args(args) as detector:
        states = _load_pseudo_entries(target, detector, args.delta_pos)
    pool = []
    for m, _, result, confident, entries in states:
        for e in entries:
            e.obc = obc.count_obc(e.box, result.prenms, cfg.delta_obc, cfg.iou_mode) \
                if result.prenms else 1
        pool.extend(entries)
    if not pool:
        print("no confident pseudo boxes; nothing to downsample")
        return EXIT_OK
    values = np.array([e.obc for e in pool], dtype=np.float64)
    model = obc.kde_fit(values, cfg.bandwidth)
    weights = obc.selection_weights(model, values)
    k = obc.subset_size(len(pool), cfg.d)
    rng = derive_rng(cfg.rng_seed, "downsample", 1)
    chosen = set(obc.weighted_sample_without_replacement(weights, k, rng).tolist())
    rows = []
    hist: dict[int, int] = {}
    index_in_frame: dict[str, int] = {}
    for i, e in enumerate(pool):
        j = index_in_frame.get(e.origin_frame, 0)
        index_in_frame[e.origin_frame] = j + 1
        hist[e.obc] = hist.get(e.obc, 0) + 1
        rows.append((e.origin_frame, j, e.obc, float(weights[i]), i in chosen))
    obc.write_obc_report(out / "obc.txt", rows, hist)
    print(f"pool {len(pool)} boxes, sigma {model.sigma:.4f}, selected {k}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    target = read_manifest(args.target_manifest)
    source = read_manifest(args.source_manifest)
    out = Path(args.out)
    (out / "points").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    ros = tuple(float(x) for x in args.ros.split(","))
    gt_pool = balance.build_gt_pool(source, args.num_classes)
    red_pool = balance.ObjectPool.from_entries([], args.num_classes,
                                               PROVENANCE_TARGET_PSEUDO)
    schedule = balance.RoundSchedule(args.s_r, args.s_g, 0)
    report = pipeline.RoundReport(1, 1)
    for c in range(1, args.num_classes + 1):
        report.per_class[c] = pipeline.ClassRoundStats(
            gt_pool=gt_pool.size(c), red_pool=red_pool.size(c))
    entries = []
    for m in target:
        points = read_points(m.points_path)
        labels = read_labels(m.labels_path, m.frame_id) if m.labels_path \
            else LabelSet(m.frame_id, [])
        rng = derive_rng(args.seed, "inject", 1, m.frame_id)
        red_sel = balance.sample_balanced(red_pool, schedule.s_r, rng)
        gt_sel = balance.sample_balanced(gt_pool, schedule.s_g, rng)
        outcome = balance.inject(points, labels, red_sel, gt_sel, ros, rng)
        for c in range(1, args.num_classes + 1):
            stats = report.per_class[c]
            stats.requested_red += min(schedule.s_r, red_pool.size(c))
            stats.requested_gt += min(schedule.s_g, gt_pool.size(c))
            stats.placed_red += outcome.placed_count(c, PROVENANCE_TARGET_PSEUDO)
            stats.placed_gt += outcome.placed_count(c, PROVENANCE_SOURCE_GT)
            stats.rejected_red += outcome.rejected_count(c, PROVENANCE_TARGET_PSEUDO)
            stats.rejected_gt += outcome.rejected_count(c, PROVENANCE_SOURCE_GT)
        p_path = out / "points" / f"{m.frame_id}.bin"
        l_path = out / "labels" / f"{m.frame_id}.txt"
        write_points(outcome.points, p_path)
        write_labels(outcome.labels, l_path)
        entries.append(ManifestEntry(m.frame_id, p_path, l_path))
    write_manifest(FrameManifest(entries), out / "manifest.tsv")
    pipeline.write_round_report(report, schedule, out / "report.txt")
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK


def _cmd_sim_gen(args) -> int:
    spec = sim.domain_spec_from_file(args.spec)
    manifest = sim.generate_domain(spec, args.out)
    print(f"wrote {len(manifest)} frames to {args.out}")
    return EXIT_OK


def _cmd_mock_detector(args) -> int:
    spec = sim.mock_detector_spec_from_file(args.spec) if args.spec \
        else sim.MockDetectorSpec()
    detector = sim.MockDetector(spec)
    return proto.serve_endpoint(detector, sys.stdin, sys.stdout,
                                prenms=not args.no_prenms, train=not args.no_train)


def _cmd_eval(args) -> int:
    pred = read_manifest(args.pred_manifest)
    truth = read_manifest(args.truth_manifest)

    def load(manifest):
        out = {}
        for m in manifest:
            if m.labels_path is None:
                raise _UsageError(f"frame {m.frame_id} has no labels")
            out[m.frame_id] = read_labels(m.labels_path, m.frame_id)
        return out

    report = sim.evaluate(load(pred), load(truth), iou_thresh=args.iou)
    for class_id in sorted(report.per_class):
        s = report.per_class[class_id]
        print(f"class {class_id}: precision={s.precision:.4f} recall={s.recall:.4f} "
              f"f1={s.f1:.4f} (tp={s.tp} fp={s.fp} fn={s.fn})")
    micro = report.micro
    print(f"micro: precision={micro.precision:.4f} recall={micro.recall:.4f} "
          f"f1={micro.f1:.4f}")
    return EXIT_OK


def _cmd_iou(args) -> int:
    a = _parse_box(args.a)
    b = _parse_box(args.b)
    print(f"bev={bev_iou(a, b):.6f} 3d={iou_3d(a, b):.6f}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "cde": _cmd_cde,
    "obc": _cmd_obc,
    "sample": _cmd_sample,
    "sim-gen": _cmd_sim_gen,
    "mock-detector": _cmd_mock_detector,
    "eval": _cmd_eval,
    "iou": _cmd_iou,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (proto.DetectorError, pipeline.PipelineError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
