"""Command line entry point: ``posehyp <synth|preprocess|train|sample|evaluate|plot>``.

Exit codes: 0 success, 1 usage or validation error, 2 numeric failure.
Every command checks its inputs before writing any output file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tape
from .data import (DataError, PoseRecord, SyntheticConfig, load_dataset, make_template, preprocess,
                   read_kv_file, read_records, save_dataset, synth_multimodal)
from .inference import (MeanShiftConfig, fps_subset, mean_shift,
                        sample_hypotheses, zero_code_pose)
from .losses import LossError
from .metrics import (group_mean, hypothesis_std, mpjpe_p1, mpjpe_p2, pck3d, per_action_table,
                      summary_json)
from .networks import Checkpoint, NetworkError
from .skeleton import GeometryError, Skeleton, builtin_skeleton, load_skeleton, save_skeleton
from .trainer import TrainConfig, TrainingData, TrainingDiverged, TrainingError, train

log = logging.getLogger("posehyp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _threads():
    value = os.environ.get("POSE_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"POSE_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _skeleton_arg(value: Optional[str], default: Optional[Skeleton] = None) -> Skeleton:
    if value is None:
        if default is None:
            raise UsageError("a skeleton is required")
        return default
    if Path(value).is_file():
        return load_skeleton(value)
    try:
        return builtin_skeleton(value)
    except (FileNotFoundError, ModuleNotFoundError, KeyError, OSError):
        raise UsageError(f"unknown skeleton {value!r} (not a file or built-in name)") from None


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _read_jsonl(path: Path) -> List[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return rows


# ------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    values = read_kv_file(_require_file(Path(args.config), "config")) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = SyntheticConfig.from_mapping(values)
    out = _writable_dir(Path(args.out))
    ds = synth_multimodal(cfg)
    save_dataset(ds.train, out / "train.jsonl")
    save_dataset(ds.test, out / "test.jsonl")
    save_skeleton(ds.skeleton, out / "skeleton.json")
    _write_jsonl(out / "modes.jsonl", [{"id": rid, "modes": [a.tolist(), b.tolist()]}
                                       for rid, (a, b) in ds.modes.items()])
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test records to {out}")
    return EXIT_OK


# -------------------------------------------------------------- preprocess

def cmd_preprocess(args) -> int:
    src = Path(args.data)
    sk_path = _require_file(src / "skeleton.json", "skeleton.json") if args.skeleton is None else None
    sk = _skeleton_arg(args.skeleton) if args.skeleton else load_skeleton(sk_path)
    splits = {}
    for name in ("train", "test"):
        p = src / f"{name}.jsonl"
        if p.is_file():
            splits[name] = read_records(p, sk)
    if "train" not in splits:
        raise UsageError(f"missing {src / 'train.jsonl'}")
    template = (np.asarray(json.loads(Path(args.template).read_text()), dtype=np.float64)
                if args.template else make_template(splits["train"], sk))
    if template.size != 3 * sk.joint_count:
        raise UsageError("template size does not match the skeleton")
    modes = _read_jsonl(src / "modes.jsonl") if (src / "modes.jsonl").is_file() else None
    processed = {name: preprocess(recs, sk, template) for name, recs in splits.items()}
    mode_rows = None
    if modes is not None:
        mode_rows = []
        for row in modes:
            recs = [PoseRecord(id=row["id"], pose3d=np.asarray(m, dtype=np.float64)) for m in row["modes"]]
            mode_rows.append({"id": row["id"], "modes": [r.pose3d.tolist() for r in preprocess(recs, sk, template)]})
    out = _writable_dir(Path(args.out))
    for name, recs in processed.items():
        save_dataset(recs, out / f"{name}.jsonl")
    save_skeleton(sk, out / "skeleton.json")
    (out / "template.json").write_text(json.dumps(template.tolist()) + "\n")
    if mode_rows is not None:
        _write_jsonl(out / "modes.jsonl", mode_rows)
    print(", ".join(f"{name}: {len(r)} records" for name, r in processed.items()))
    return EXIT_OK


# ------------------------------------------------------------------- train

def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_path = _require_file(data_dir / "train.jsonl", "training data")
    sk_path = _require_file(data_dir / "skeleton.json", "skeleton.json")
    values = read_kv_file(_require_file(Path(args.config), "config")) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    cfg = TrainConfig.from_flat(values)
    records, sk = load_dataset(train_path, sk_path)
    data = TrainingData.from_records(records, sk)
    resume = Checkpoint.load(_require_file(Path(args.resume), "checkpoint")) if args.resume else None
    out = _writable_dir(Path(args.out))
    progress = (lambda e, t: print(f"epoch {e + 1}: " + " ".join(f"{k}={v:.4g}" for k, v in t.items()),
                                   flush=True))
    result = train(data, cfg, out_dir=out, resume=resume, progress=progress)
    print(f"trained to epoch {result.checkpoint.epoch} (step {result.checkpoint.step}); output in {out}")
    return EXIT_OK


# ------------------------------------------------------------------ sample

def _parse_mode(mode: str):
    if mode in ("raw", "ms", "zc"):
        return mode, None
    if mode.startswith("fps-"):
        try:
            k = int(mode[4:])
        except ValueError:
            k = 0
        if k >= 1:
            return "fps", k
    raise UsageError(f"unknown mode {mode!r} (raw, ms, zc or fps-<k>)")


def cmd_sample(args) -> int:
    kind, k = _parse_mode(args.mode)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if kind == "fps" and k > args.n:
        raise UsageError(f"fps-{k} needs --n >= {k}")
    ckpt = Checkpoint.load(_require_file(Path(args.checkpoint), "checkpoint"))
    model = ckpt.model()
    if args.skeleton is not None and _skeleton_arg(args.skeleton) != model.skeleton:
        raise UsageError("skeleton does not match the checkpoint skeleton")
    try:
        records = read_records(_require_file(Path(args.input), "input"), model.skeleton)
    except DataError as exc:
        raise UsageError(f"input incompatible with checkpoint skeleton: {exc}") from None
    missing = [r.id for r in records if r.pose2d is None]
    if missing:
        raise UsageError(f"records without pose2d: {', '.join(missing[:10])}")
    rows = []
    for i, r in enumerate(records):
        seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1, np.uint64)[0])
        M = tape.value_of(model.camera(r.pose2d[None]))[0]
        if kind == "zc":
            poses, seeds = zero_code_pose(r.pose2d, model)[None], []
        else:
            H = sample_hypotheses(r.pose2d, args.n, model, seed)
            if kind == "raw":
                poses, seeds = H.poses, H.seeds
            elif kind == "ms":
                poses, seeds = mean_shift(H, MeanShiftConfig()).mode[None], H.seeds
            else:
                sub = fps_subset(H, k)
                poses, seeds = sub.poses, sub.seeds
        rows.append({"id": r.id, "mode": args.mode, "seed": seed if kind != "zc" else None,
                     "seeds": [str(s) for s in seeds], "camera": M.tolist(), "pose2d": r.pose2d.tolist(),
                     "hypotheses": poses.tolist(), "action": r.action})
    out = Path(args.out)
    _writable_dir(out.parent)
    _write_jsonl(out, rows)
    print(f"wrote {len(rows)} records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def _load_predictions(path: Path) -> Dict[str, dict]:
    preds = {}
    for lineno, row in enumerate(_read_jsonl(path), 1):
        if "id" not in row or "hypotheses" not in row:
            raise DataError(f"{path}:{lineno}: prediction needs id and hypotheses")
        preds[str(row["id"])] = row
    return preds


def cmd_evaluate(args) -> int:
    if args.protocol not in ("p1", "p2", "pck", "std"):
        raise UsageError(f"unknown protocol {args.protocol!r}")
    preds = _load_predictions(_require_file(Path(args.predictions), "predictions"))
    gt_path = _require_file(Path(args.ground_truth), "ground truth")
    sk_path = Path(args.skeleton) if args.skeleton else gt_path.parent / "skeleton.json"
    sk = load_skeleton(sk_path) if sk_path.is_file() else _skeleton_arg(args.skeleton, builtin_skeleton())
    gts = {r.id: r for r in read_records(gt_path, sk) if r.pose3d is not None}
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        msg = []
        if missing_pred:
            msg.append("missing predictions: " + ", ".join(missing_pred))
        if missing_gt:
            msg.append("missing ground truth: " + ", ".join(missing_gt))
        raise UsageError("; ".join(msg))
    c = sk.joint_count
    rows, bh_rows = [], []
    multi = False
    for rid in sorted(gts):
        r = gts[rid]
        H = np.asarray(preds[rid]["hypotheses"], dtype=np.float64).reshape(-1, 3 * c)
        action = r.action or preds[rid].get("action") or "all"
        if args.protocol == "std":
            if len(H) < 2:
                raise UsageError(f"record {rid}: std protocol needs at least two hypotheses")
            rows.append((action, hypothesis_std(H, sk.root)))
            continue
        multi = multi or len(H) > 1
        if args.protocol == "p1":
            M = preds[rid].get("camera")
            if M is None:
                raise UsageError(f"record {rid}: p1 needs the camera matrix in the predictions")
            target = r.camera_frame_pose3d if r.camera_frame_pose3d is not None else r.pose3d
            errs = [mpjpe_p1(h, np.asarray(M), target) for h in H]
        elif args.protocol == "p2":
            errs = [mpjpe_p2(h, r.pose3d) for h in H]
        else:
            errs = [100.0 * pck3d(h, r.pose3d, args.radius) for h in H]
        rows.append((action, float(np.mean(errs))))
        bh_rows.append((action, float(max(errs) if args.protocol == "pck" else min(errs))))
    label = {"p1": "MPJPE-P1", "p2": "MPJPE-P2", "pck": "3DPCK", "std": "STD"}[args.protocol]
    values, counts = group_mean(rows)
    table = per_action_table(values, counts, label)
    summary = {f"{label}": float(np.mean([v for _, v in rows])) if rows else float("nan"),
               "records": len(rows)}
    if multi:
        bvals, bcounts = group_mean(bh_rows)
        bh_table = per_action_table(bvals, bcounts, f"{label}-BH")
        table = [a + "\t" + b.split("\t", 1)[1] for a, b in zip(table, bh_table)]
        summary[f"{label}-BH"] = float(np.mean([v for _, v in bh_rows]))
    out = _writable_dir(Path(args.out))
    (out / "report.tsv").write_text("\n".join(table) + "\n")
    (out / "summary.json").write_text(summary_json(summary))
    print("\n".join(table))
    return EXIT_OK


# -------------------------------------------------------------------- plot

VIEWS = ((30.0, 15.0), (120.0, 15.0))


def _view_matrix(azimuth: float, elevation: float) -> np.ndarray:
    a, e = np.deg2rad(azimuth), np.deg2rad(elevation)
    # rotate about the vertical (y) axis, then tilt about the horizontal axis
    ry = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(e), -np.sin(e)], [0.0, np.sin(e), np.cos(e)]])
    return (rx @ ry)[:2]


def _svg_lines(points: np.ndarray, sk: Skeleton, box: tuple, color: str,
               frame: Optional[np.ndarray] = None) -> List[str]:
    """Bones of ``points`` fitted into ``box``; ``frame`` (default ``points``) sets the extent."""
    frame = points if frame is None else frame
    x0, y0, w, h = box
    span = max(float(np.ptp(frame[:, 0])), float(np.ptp(frame[:, 1])), 1e-9)
    center = (frame.max(axis=0) + frame.min(axis=0)) / 2.0
    s = 0.9 * min(w, h) / span
    px = x0 + w / 2.0 + s * (points[:, 0] - center[0])
    py = y0 + h / 2.0 - s * (points[:, 1] - center[1])
    return [f'<line x1="{px[a]:.2f}" y1="{py[a]:.2f}" x2="{px[b]:.2f}" y2="{py[b]:.2f}" '
            f'stroke="{color}" stroke-width="2"/>' for a, b in sk.bones]


def _svg(width: int, height: int, body: List[str], title: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<title>{title}</title>\n'
            '<rect width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def cmd_plot(args) -> int:
    rows = _read_jsonl(_require_file(Path(args.hypotheses), "hypotheses file"))
    sk = _skeleton_arg(args.skeleton)
    c = sk.joint_count
    parsed = []
    for row in rows:
        H = np.asarray(row.get("hypotheses", []), dtype=np.float64)
        x = np.asarray(row.get("pose2d", []), dtype=np.float64)
        if H.ndim != 2 or H.shape[1] != 3 * c or x.size != 2 * c:
            raise UsageError(f"record {row.get('id')}: poses do not match the {c}-joint skeleton")
        M = np.asarray(row["camera"], dtype=np.float64) if row.get("camera") is not None else None
        parsed.append((str(row["id"]), x.reshape(c, 2), H.reshape(len(H), c, 3), M))
    if not parsed:
        return EXIT_OK
    out = _writable_dir(Path(args.out))
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    with open(out / "coordinates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "hypothesis", "joint", "x", "y", "z"])
        for rid, x, H, M in parsed:
            for j in range(c):
                w.writerow([rid, "input", sk.joint_names[j], repr(x[j, 0]), repr(x[j, 1]), ""])
            for i, h in enumerate(H):
                for j in range(c):
                    w.writerow([rid, i, sk.joint_names[j]] + [repr(v) for v in h[j]])
    for rid, x, H, M in parsed:
        (out / f"{rid}_input.svg").write_text(
            _svg(240, 240, _svg_lines(x, sk, (0, 0, 240, 240), "black"), f"{rid} input"))
        for i, h in enumerate(H):
            body = []
            for v, (az, el) in enumerate(VIEWS):
                body += _svg_lines(h @ _view_matrix(az, el).T, sk, (240 * v, 0, 240, 240), palette[i % len(palette)])
            (out / f"{rid}_hyp{i}.svg").write_text(_svg(480, 240, body, f"{rid} hypothesis {i}"))
        # reprojections through the record's camera, drawn in the input's frame
        projs = [h @ M.T for h in H] if M is not None else []
        frame = np.concatenate([x] + projs)
        body = _svg_lines(x, sk, (0, 0, 240, 240), "black", frame)
        for i, proj in enumerate(projs):
            body += _svg_lines(proj, sk, (0, 0, 240, 240), palette[i % len(palette)], frame)
        (out / f"{rid}_reproj.svg").write_text(_svg(240, 240, body, f"{rid} reprojections"))
    print(f"plotted {len(parsed)} records to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posehyp", description="Multi-hypothesis 3D pose lifting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write the synthetic two-mode dataset")
    s.add_argument("--config", help="key = value file with synthetic dataset fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="template-align 3D poses and normalize 2D poses")
    s.add_argument("--data", required=True, help="directory with train.jsonl [, test.jsonl, modes.jsonl]")
    s.add_argument("--skeleton", help="skeleton file or built-in name (default: <data>/skeleton.json)")
    s.add_argument("--template", help="JSON list with a template 3D pose")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train the networks")
    s.add_argument("--config", help="key = value training config")
    s.add_argument("--data", required=True, help="directory with train.jsonl and skeleton.json")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate or select hypotheses")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="JSONL records with pose2d")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--mode", default="raw", help="raw, ms, zc or fps-<k>")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--skeleton", help="expected skeleton; must match the checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("evaluate", help="score predictions against ground truth")
    s.add_argument("--predictions", required=True)
    s.add_argument("--ground-truth", dest="ground_truth", required=True)
    s.add_argument("--protocol", default="p2", help="p1, p2, pck or std")
    s.add_argument("--radius", type=float, default=150.0, help="3DPCK radius (mm)")
    s.add_argument("--skeleton", help="skeleton file or built-in name (default: next to ground truth)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="SVG panels and a coordinate CSV for sampled hypotheses")
    s.add_argument("--hypotheses", required=True)
    s.add_argument("--skeleton", required=True, help="skeleton file or built-in name")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataError, TrainingError, GeometryError, NetworkError, LossError,
            tape.TapeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
