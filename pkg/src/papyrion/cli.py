"""The papyrion command line.

One executable, twelve subcommands, one pipeline: binarize pages, score the
results, augment a corpus, extract patch descriptors, build codebooks,
encode VLAD embeddings, evaluate writer retrieval/identification, and
correlate the two metric families.

Every subcommand accepts --manifest FILE holding its flags as a JSON object;
explicit flags win over the file, the file wins over built-in defaults.
Reports are JSON with sorted keys, no timestamps, and always record the
toolkit version, the seed, and the fully resolved configuration, so a rerun
from the report alone reproduces the output byte for byte. Infinite values
are serialized as the string "inf".

Exit codes: 0 success, 1 domain error (one line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import glob as globmod
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from papyrion import __version__, analysis, binarize, features, metrics, writer_eval
from papyrion import augment as augmod
from papyrion import corpus
from papyrion.errors import PapyrionError, ParameterError
from papyrion.imgcore import (
    BinaryImage,
    RasterImage,
    load_binary,
    load_image,
    save_binary,
    to_grayscale,
)

log = logging.getLogger("papyrion.cli")


class UsageError(PapyrionError):
    """Bad invocation (missing/unknown options) rather than bad data."""


# ---------------------------------------------------------------------------
# report plumbing


def _jsonable(x):
    """Convert a report tree to plain JSON types; +/-inf become tokens."""
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        f = float(x)
        if math.isnan(f):
            raise PapyrionError("NaN in report; refusing to serialize")
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if x is None or isinstance(x, str):
        return x
    raise PapyrionError(f"cannot serialize report value of type {type(x).__name__}")


def _from_token(v):
    if v == "inf":
        return math.inf
    if v == "-inf":
        return -math.inf
    return v


def render_json(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def write_text_file(path: str | Path, text: str) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise PapyrionError(f"cannot write {path}: {e}") from None


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["inf" if isinstance(v, float) and math.isinf(v) else v for v in row])
    return buf.getvalue()


def _image_paths(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise PapyrionError(f"no such directory: {directory}")
    exts = {".png", ".pgm", ".ppm"}
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in exts)


def _parse_range(value) -> tuple[int, ...]:
    """Grid range: "start:stop:step" (stop inclusive) or an explicit list."""
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    parts = str(value).split(":")
    if len(parts) != 3:
        raise ParameterError(f"range must be start:stop:step, got {value!r}")
    try:
        start, stop, step = (int(p) for p in parts)
    except ValueError:
        raise ParameterError(f"range must be three integers, got {value!r}") from None
    if step <= 0:
        raise ParameterError(f"range step must be positive, got {step}")
    if stop < start:
        raise ParameterError(f"range stop below start in {value!r}")
    return tuple(range(start, stop + 1, step))


def _parse_methods(value) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(str(m) for m in value)
    return tuple(m.strip() for m in str(value).split(",") if m.strip())


def _thresh_params(cfg: dict) -> binarize.LocalThreshParams | None:
    if cfg["method"] == "otsu":
        return None
    if cfg.get("window") is None:
        raise ParameterError(f"method {cfg['method']!r} needs --window")
    return binarize.LocalThreshParams(
        window=int(cfg["window"]),
        k=cfg.get("k"),
        r=float(cfg.get("r", binarize.DEFAULT_R)),
        minn=cfg.get("minn"),
        glyph=cfg.get("glyph"),
    )


def _mask_binarizer(cfg: dict):
    """Binarizer closure for augmentation text masks."""
    method = cfg.get("mask_method", "otsu")
    if method == "otsu":
        return binarize.binarize_otsu
    window = cfg.get("mask_window")
    if window is None:
        raise ParameterError(f"mask method {method!r} needs --mask-window")
    params = binarize.LocalThreshParams(window=int(window), k=cfg.get("mask_k"))

    def run(gray: RasterImage) -> BinaryImage:
        return binarize.binarize_method(gray, method, params)

    return run


# ---------------------------------------------------------------------------
# subcommand runners: config dict in, report payload out


def _run_binarize(cfg: dict) -> dict:
    gray = to_grayscale(load_image(cfg["input"]))
    if cfg.get("invert"):
        gray = RasterImage(255 - gray.px)
    result = binarize.binarize_method(
        gray,
        cfg["method"],
        _thresh_params(cfg),
        q=float(cfg.get("q", binarize.GATOS_Q)),
        p1=float(cfg.get("p1", binarize.GATOS_P1)),
        p2=float(cfg.get("p2", binarize.GATOS_P2)),
    )
    save_binary(result, cfg["output"])
    return {
        "input": str(cfg["input"]),
        "output": str(cfg["output"]),
        "ink_pixels": result.ink_count(),
        "total_pixels": result.height * result.width,
    }


def _run_grid_search(cfg: dict) -> dict:
    manifest = corpus.ingest_pairs(cfg["images"], cfg["gt"])
    pairs = [
        (to_grayscale(load_image(r.image)), load_binary(r.gt)) for r in manifest.rows
    ]
    spec = binarize.GridSpec(
        methods=_parse_methods(cfg["methods"]),
        windows=_parse_range(cfg.get("window_range")),
        minn_values=_parse_range(cfg.get("minn_range")),
        glyph_values=_parse_range(cfg.get("glyph_range")),
    )
    best, table = binarize.grid_search(
        pairs, spec, objective=cfg.get("objective", "fm"), threads=int(cfg.get("threads", 1))
    )
    as_row = lambda r: {
        "method": r.method,
        "window": r.window,
        "param": r.second_name,
        "param_value": r.second_value,
        "score": r.score,
    }
    if cfg.get("out"):
        text = _csv_text(
            ["method", "window", "param", "param_value", "score"],
            [
                [r.method, r.window, r.second_name or "", r.second_value, r.score]
                for r in table
            ],
        )
        write_text_file(cfg["out"], text)
    return {
        "objective": cfg.get("objective", "fm"),
        "images": len(pairs),
        "best": {m: as_row(r) for m, r in sorted(best.items())},
        "table": [as_row(r) for r in table],
        "warnings": manifest.warnings,
    }


def _run_eval_bin(cfg: dict) -> dict:
    manifest = corpus.ingest_pairs(cfg["pred"], cfg["gt"])
    rows = []
    sums = {"fm": [], "pfm": [], "psnr": [], "drd": []}
    for r in manifest.rows:
        rep = metrics.evaluate_pair(load_binary(r.image), load_binary(r.gt))
        d = rep.as_dict()
        for key in sums:
            sums[key].append(d[key])
        rows.append({"image": r.stem, **d})
    payload = {
        "rows": rows,
        "images": len(rows),
        "warnings": manifest.warnings,
        "method_id": cfg.get("method_id"),
        "subset": cfg.get("subset"),
    }
    for key, vals in sums.items():
        payload[f"mean_{key}"] = math.fsum(vals) / len(vals)
    return payload


def _eval_bin_csv(payload: dict) -> str:
    return _csv_text(
        ["image", "fm", "pfm", "psnr", "drd"],
        [[r["image"], r["fm"], r["pfm"], r["psnr"], r["drd"]] for r in payload["rows"]],
    )


def _run_augment(cfg: dict) -> dict:
    acfg = augmod.AugmentConfig(
        inpaint_radius=int(cfg.get("radius", 5)),
        texture_alpha=float(cfg.get("alpha", 0.70)),
        bg_threshold=int(cfg.get("bg_threshold", 170)),
        seed=int(cfg.get("seed", 0)),
    )
    payload = augmod.augment_corpus(
        sources=_image_paths(cfg["sources"]),
        papyri=_image_paths(cfg["papyri"]),
        out_dir=Path(cfg["out"]),
        cfg=acfg,
        masks_dir=Path(cfg["masks"]) if cfg.get("masks") else None,
        mask_binarizer=_mask_binarizer(cfg),
    )
    return payload


def _pdsc_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise PapyrionError(f"no such directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix == ".pdsc")
    if not files:
        raise PapyrionError(f"no .pdsc descriptor files in {directory}")
    return files


def _run_extract(cfg: dict) -> dict:
    detect_on = cfg.get("detect_on", "binary")
    if detect_on not in ("binary", "gray"):
        raise ParameterError(f"detect_on must be 'binary' or 'gray', got {detect_on!r}")
    gray_dir = cfg.get("gray")
    if detect_on == "gray" and not gray_dir:
        raise ParameterError("--detect-on gray needs --gray DIR")
    gray_by_stem = {}
    if gray_dir:
        gray_by_stem = {p.stem: p for p in _image_paths(gray_dir)}
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    min_fg = float(cfg.get("min_fg", 0.05))

    rows = []
    for path in _image_paths(cfg["bin"]):
        mask = load_binary(path)
        if detect_on == "gray":
            if path.stem not in gray_by_stem:
                raise PapyrionError(f"no grayscale image for stem {path.stem!r}")
            source = to_grayscale(load_image(gray_by_stem[path.stem]))
        else:
            source = to_grayscale(load_image(path))
        kps = features.detect_keypoints(source)
        patches, kept = features.extract_patches(source, mask, kps, min_fg=min_fg)
        desc = features.compute_descriptors(patches, kept, image_id=path.stem)
        features.write_pdsc(out_dir / f"{path.stem}.pdsc", desc)
        rows.append({"image": path.stem, "keypoints": len(kps), "descriptors": desc.count})
    return {"rows": rows, "images": len(rows), "min_fg": min_fg, "detect_on": detect_on}


def _load_descriptor_stack(directory) -> tuple[list[features.DescriptorSet], np.ndarray]:
    sets = [features.read_pdsc(p) for p in _pdsc_files(directory)]
    mats = [s.values for s in sets if s.count > 0]
    if not mats:
        raise PapyrionError("descriptor files contain no descriptors")
    return sets, np.vstack(mats)


def _run_codebook(cfg: dict) -> dict:
    sets, data = _load_descriptor_stack(cfg["desc"])
    cb = features.kmeans_fit(data, int(cfg.get("k", 128)), seed=int(cfg.get("seed", 0)))
    features.save_codebook(cfg["out"], cb)
    return {
        "k": cb.k,
        "dim": cb.dim,
        "descriptors": int(data.shape[0]),
        "images": len(sets),
        "inertia": cb.inertia,
        "iterations": len(cb.inertia_history),
        "out": str(cfg["out"]),
    }


def _run_surrogate_labels(cfg: dict) -> dict:
    sets, data = _load_descriptor_stack(cfg["desc"])
    cb = features.kmeans_fit(data, int(cfg.get("k", 5000)), seed=int(cfg.get("seed", 0)))
    rows = []
    for s in sets:
        if s.count == 0:
            continue
        labels = features.assign_clusters(s.values, cb)
        for i, lab in enumerate(labels.tolist()):
            rows.append([s.image_id, i, lab])
    text = _csv_text(["image", "patch-index", "cluster"], rows)
    if cfg.get("out"):
        write_text_file(cfg["out"], text)
    return {
        "k": cb.k,
        "descriptors": int(data.shape[0]),
        "images": len(sets),
        "inertia": cb.inertia,
        "rows": len(rows),
        "out": cfg.get("out"),
    }


def _run_encode(cfg: dict) -> dict:
    cb = features.load_codebook(cfg["codebook"])
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    intra = bool(cfg.get("intra_norm", False))
    rows = []
    for path in _pdsc_files(cfg["desc"]):
        desc = features.read_pdsc(path)
        vec = features.vlad_encode(desc, cb, intra_norm=intra)
        np.save(out_dir / f"{path.stem}.npy", vec.values)
        rows.append({"image": path.stem, "descriptors": desc.count, "degenerate": vec.degenerate})
    return {"rows": rows, "images": len(rows), "dim": cb.k * cb.dim, "intra_norm": intra}


def _run_retrieve(cfg: dict) -> dict:
    index = writer_eval.load_embeddings(cfg["emb"])
    payload = writer_eval.retrieval_eval(index)
    payload["method_id"] = cfg.get("method_id")
    return payload


def _run_classify(cfg: dict) -> dict:
    index = writer_eval.load_embeddings(cfg["emb"])
    combos = writer_eval.sample_reference_sets(
        index,
        per_writer=int(cfg.get("refs", 2)),
        count=int(cfg.get("combinations", 500)),
        seed=int(cfg.get("seed", 0)),
    )
    payload = writer_eval.nn_classify_eval(index, combos, score_mode=cfg.get("score_mode", "max"))
    payload["refs_per_writer"] = int(cfg.get("refs", 2))
    payload["method_id"] = cfg.get("method_id")
    return payload


_WRITER_METRIC_KEYS = (
    "map",
    "top1",
    "top5",
    "top10",
    "top1_mean",
    "top1_std",
    "top5_mean",
    "top5_std",
)


def _glob_files(pattern: str) -> list[Path]:
    files = sorted(Path(p) for p in globmod.glob(pattern))
    if not files:
        raise PapyrionError(f"no files match {pattern!r}")
    return files


def _load_report(path: Path) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise PapyrionError(f"cannot read report {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise PapyrionError(f"report {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise PapyrionError(f"report {path} is not a JSON object")
    return data


def _run_correlate(cfg: dict) -> dict:
    bin_reports: dict[str, dict[str, dict[str, float]]] = {}
    for path in _glob_files(cfg["bin_reports"]):
        rep = _load_report(path)
        method, subset = rep.get("method_id"), rep.get("subset")
        if not method or not subset:
            log.warning("skipping %s: no method_id/subset", path.name)
            continue
        per = bin_reports.setdefault(method, {})
        if subset in per:
            raise PapyrionError(f"duplicate report for method {method!r} subset {subset!r}")
        missing = [m for m in analysis.BIN_METRICS if f"mean_{m}" not in rep]
        if missing:
            raise PapyrionError(
                f"report {path.name} lacks mean metrics: {', '.join(missing)}"
            )
        per[subset] = {
            m: float(_from_token(rep[f"mean_{m}"])) for m in analysis.BIN_METRICS
        }
    writer_reports: dict[str, dict[str, float]] = {}
    for path in _glob_files(cfg["writer_reports"]):
        rep = _load_report(path)
        method = rep.get("method_id")
        if not method:
            log.warning("skipping %s: no method_id", path.name)
            continue
        dst = writer_reports.setdefault(method, {})
        for key in _WRITER_METRIC_KEYS:
            if key in rep:
                if key in dst:
                    raise PapyrionError(
                        f"metric {key!r} for method {method!r} appears in two reports"
                    )
                dst[key] = float(_from_token(rep[key]))
    payload = analysis.correlation_report(
        bin_reports, writer_reports, rank=bool(cfg.get("rank", False))
    )
    if cfg.get("scatter"):
        write_text_file(cfg["scatter"], analysis.scatter_csv(payload))
    return payload


def _run_run(cfg: dict) -> dict:
    manifest = corpus.load_experiment_manifest(cfg["manifest"])
    status, stages = corpus.run_manifest(manifest, threads=int(cfg.get("threads", 1)))
    return {
        "manifest": str(cfg["manifest"]),
        "manifest_seed": manifest.get("seed", 0),
        "status": status,
        "stages": stages,
    }


# ---------------------------------------------------------------------------
# registry: defaults, allowed keys, runners

_COMMON_DEFAULTS = {"seed": 0, "threads": 1}

CONFIG_DEFAULTS: dict[str, dict] = {
    "binarize": {
        "input": None,
        "output": None,
        "method": None,
        "window": None,
        "k": None,
        "r": binarize.DEFAULT_R,
        "minn": None,
        "glyph": None,
        "invert": False,
        "q": binarize.GATOS_Q,
        "p1": binarize.GATOS_P1,
        "p2": binarize.GATOS_P2,
        **_COMMON_DEFAULTS,
    },
    "grid-search": {
        "images": None,
        "gt": None,
        "methods": None,
        "window_range": None,
        "minn_range": None,
        "glyph_range": None,
        "objective": "fm",
        "out": None,
        **_COMMON_DEFAULTS,
    },
    "eval-bin": {
        "pred": None,
        "gt": None,
        "out": None,
        "method_id": None,
        "subset": None,
        **_COMMON_DEFAULTS,
    },
    "augment": {
        "sources": None,
        "papyri": None,
        "masks": None,
        "out": None,
        "alpha": 0.70,
        "radius": 5,
        "bg_threshold": 170,
        "mask_method": "otsu",
        "mask_window": None,
        "mask_k": None,
        **_COMMON_DEFAULTS,
    },
    "extract": {
        "bin": None,
        "gray": None,
        "out": None,
        "min_fg": 0.05,
        "detect_on": "binary",
        **_COMMON_DEFAULTS,
    },
    "codebook": {"desc": None, "out": None, "k": 128, **_COMMON_DEFAULTS},
    "surrogate-labels": {"desc": None, "out": None, "k": 5000, **_COMMON_DEFAULTS},
    "encode": {
        "desc": None,
        "codebook": None,
        "out": None,
        "intra_norm": False,
        **_COMMON_DEFAULTS,
    },
    "retrieve": {"emb": None, "out": None, "method_id": None, **_COMMON_DEFAULTS},
    "classify": {
        "emb": None,
        "refs": 2,
        "combinations": 500,
        "score_mode": "max",
        "out": None,
        "method_id": None,
        **_COMMON_DEFAULTS,
    },
    "correlate": {
        "bin_reports": None,
        "writer_reports": None,
        "out": None,
        "scatter": None,
        "rank": False,
        **_COMMON_DEFAULTS,
    },
    "run": {"manifest": None, "out": None, **_COMMON_DEFAULTS},
}

_REQUIRED: dict[str, tuple[str, ...]] = {
    "binarize": ("input", "output", "method"),
    "grid-search": ("images", "gt", "methods"),
    "eval-bin": ("pred", "gt"),
    "augment": ("sources", "papyri", "out"),
    "extract": ("bin", "out"),
    "codebook": ("desc", "out"),
    "surrogate-labels": ("desc", "out"),
    "encode": ("desc", "codebook", "out"),
    "retrieve": ("emb",),
    "classify": ("emb",),
    "correlate": ("bin_reports", "writer_reports"),
    "run": ("manifest",),
}

RUNNERS = {
    "binarize": _run_binarize,
    "grid-search": _run_grid_search,
    "eval-bin": _run_eval_bin,
    "augment": _run_augment,
    "extract": _run_extract,
    "codebook": _run_codebook,
    "surrogate-labels": _run_surrogate_labels,
    "encode": _run_encode,
    "retrieve": _run_retrieve,
    "classify": _run_classify,
    "correlate": _run_correlate,
    "run": _run_run,
}

CONFIG_KEYS = {name: set(defaults) for name, defaults in CONFIG_DEFAULTS.items()}

# commands whose --out is the JSON report itself; for the rest, --out is an
# artifact (directory, CSV table, codebook file) the runner writes, and the
# report goes to stdout
_OUT_IS_REPORT = frozenset({"eval-bin", "retrieve", "classify", "correlate"})

# commands with a CSV rendering of their row payload
_CSV_RENDERERS = {
    "eval-bin": _eval_bin_csv,
    "grid-search": lambda payload: _csv_text(
        ["method", "window", "param", "param_value", "score"],
        [
            [r["method"], r["window"], r["param"] or "", r["param_value"], r["score"]]
            for r in payload["table"]
        ],
    ),
}


def run_stage(name: str, config: dict) -> tuple[dict, dict]:
    """Resolve a config against the command's defaults and execute it.

    This is the single entry point shared by direct CLI calls and manifest
    stages, so both paths produce identical reports. Returns (resolved
    config, full report including the envelope).
    """
    if name not in RUNNERS:
        raise UsageError(f"unknown subcommand {name!r}")
    unknown = set(config) - CONFIG_KEYS[name]
    if unknown:
        raise UsageError(f"{name}: unknown config keys: {', '.join(sorted(unknown))}")
    resolved = {**CONFIG_DEFAULTS[name], **config}
    missing = [key for key in _REQUIRED[name] if resolved.get(key) is None]
    if missing:
        raise UsageError(f"{name}: missing required options: {', '.join(missing)}")
    payload = RUNNERS[name](resolved)
    report = {
        "version": __version__,
        "command": name,
        "seed": resolved["seed"],
        "config": {k: resolved[k] for k in sorted(resolved)},
        **payload,
    }
    if name in _OUT_IS_REPORT and resolved.get("out"):
        write_text_file(resolved["out"], render_json(report))
    return resolved, report


# ---------------------------------------------------------------------------
# argument parsing

_S = argparse.SUPPRESS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=_S,
                        help="more logging (-vv for debug)")
    common.add_argument("--threads", type=int, default=_S, help="worker thread hint")
    common.add_argument("--seed", type=int, default=_S, help="RNG seed, recorded in reports")
    common.add_argument("--format", choices=("json", "csv"), default=_S,
                        help="stdout rendering of the report")
    common.add_argument("--manifest", default=_S, metavar="FILE",
                        help="JSON file supplying options for this subcommand")

    parser = argparse.ArgumentParser(
        prog="papyrion",
        description="Binarization, augmentation, and writer-retrieval toolkit "
        "for degraded manuscripts.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"papyrion {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("binarize", parents=[common], help="threshold one image")
    p.add_argument("input", nargs="?", default=_S)
    p.add_argument("output", nargs="?", default=_S)
    p.add_argument("--method", choices=binarize.METHODS, default=_S)
    p.add_argument("--window", type=int, default=_S)
    p.add_argument("--k", type=float, default=_S)
    p.add_argument("--r", type=float, default=_S)
    p.add_argument("--min-n", "--minN", dest="minn", type=int, default=_S)
    p.add_argument("--glyph", type=int, default=_S)
    p.add_argument("--q", type=float, default=_S)
    p.add_argument("--p1", type=float, default=_S)
    p.add_argument("--p2", type=float, default=_S)
    p.add_argument("--invert", action="store_true", default=_S,
                   help="invert the grayscale input first (light ink)")

    p = sub.add_parser("grid-search", parents=[common],
                       help="sweep binarization parameters against ground truth")
    p.add_argument("--images", default=_S)
    p.add_argument("--gt", default=_S)
    p.add_argument("--methods", default=_S, help="comma-separated method list")
    p.add_argument("--window-range", default=_S, metavar="A:B:S")
    p.add_argument("--minn-range", default=_S, metavar="A:B:S")
    p.add_argument("--glyph-range", default=_S, metavar="A:B:S")
    p.add_argument("--objective", choices=binarize.OBJECTIVES, default=_S)
    p.add_argument("--out", default=_S, help="CSV table destination")

    p = sub.add_parser("eval-bin", parents=[common],
                       help="score binarized images against ground truth")
    p.add_argument("--pred", default=_S)
    p.add_argument("--gt", default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--method-id", default=_S)
    p.add_argument("--subset", default=_S)

    p = sub.add_parser("augment", parents=[common],
                       help="synthesize pages on inpainted papyrus textures")
    p.add_argument("--sources", default=_S)
    p.add_argument("--papyri", default=_S)
    p.add_argument("--masks", default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--alpha", "--texture-alpha", dest="alpha", type=float, default=_S)
    p.add_argument("--radius", type=int, default=_S)
    p.add_argument("--bg-threshold", type=int, default=_S)
    p.add_argument("--mask-method", choices=binarize.METHODS, default=_S)
    p.add_argument("--mask-window", type=int, default=_S)
    p.add_argument("--mask-k", type=float, default=_S)

    p = sub.add_parser("extract", parents=[common],
                       help="detect keypoints and write patch descriptors")
    p.add_argument("--bin", default=_S, help="directory of binarized images")
    p.add_argument("--gray", default=_S, help="directory of grayscale originals")
    p.add_argument("--out", default=_S)
    p.add_argument("--min-fg", type=float, default=_S)
    p.add_argument("--detect-on", choices=("binary", "gray"), default=_S)

    p = sub.add_parser("codebook", parents=[common], help="fit a k-means vocabulary")
    p.add_argument("--desc", default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--k", type=int, default=_S)

    p = sub.add_parser("surrogate-labels", parents=[common],
                       help="cluster patches and emit image,patch-index,cluster CSV")
    p.add_argument("--desc", default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--k", type=int, default=_S)

    p = sub.add_parser("encode", parents=[common], help="encode VLAD embeddings")
    p.add_argument("--desc", default=_S)
    p.add_argument("--codebook", default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--intra-norm", action="store_true", default=_S)

    p = sub.add_parser("retrieve", parents=[common],
                       help="leave-one-out writer retrieval")
    p.add_argument("--emb", default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--method-id", default=_S)

    p = sub.add_parser("classify", parents=[common],
                       help="reference-based writer identification")
    p.add_argument("--emb", default=_S)
    p.add_argument("--refs", type=int, default=_S)
    p.add_argument("--combinations", type=int, default=_S)
    p.add_argument("--score-mode", choices=("max", "mean"), default=_S)
    p.add_argument("--out", default=_S)
    p.add_argument("--method-id", default=_S)

    p = sub.add_parser("correlate", parents=[common],
                       help="correlate binarization metrics with writer metrics")
    p.add_argument("--bin-reports", default=_S, metavar="GLOB")
    p.add_argument("--writer-reports", default=_S, metavar="GLOB")
    p.add_argument("--out", default=_S)
    p.add_argument("--scatter", default=_S, metavar="CSV")
    p.add_argument("--rank", action="store_true", default=_S,
                   help="rank correlation instead of linear")

    p = sub.add_parser("run", parents=[common], help="execute an experiment manifest")
    p.add_argument("run_manifest", nargs="?", default=_S, metavar="MANIFEST")
    p.add_argument("--out", default=_S, help="run report destination")

    return parser


_NON_CONFIG_KEYS = {"command", "verbose", "format", "manifest"}


def _env_int(name: str) -> int | None:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got {raw!r}") from None


def _gather_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then environment, then --manifest file, then explicit flags."""
    config: dict = {}
    env_threads = _env_int("PAPYRION_THREADS")
    if env_threads is not None:
        config["threads"] = env_threads
    env_seed = _env_int("PAPYRION_SEED")
    if env_seed is not None:
        config["seed"] = env_seed

    manifest_path = getattr(ns, "manifest", None)
    if command == "run" and manifest_path:
        config["manifest"] = manifest_path
    elif manifest_path:
        try:
            data = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise PapyrionError(f"no such manifest: {manifest_path}") from None
        except json.JSONDecodeError as e:
            raise PapyrionError(f"manifest is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise PapyrionError("option manifest must be a JSON object")
        config.update(data)

    explicit = {
        k: v for k, v in vars(ns).items() if k not in _NON_CONFIG_KEYS
    }
    if command == "run" and "run_manifest" in explicit:
        explicit["manifest"] = explicit.pop("run_manifest")
    config.update(explicit)
    return config


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)

    verbosity = getattr(ns, "verbose", 0)
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        stream=sys.stderr, level=level, format="papyrion: %(levelname)s: %(message)s"
    )

    command = getattr(ns, "command", None)
    if command is None:
        parser.print_help()
        return 2

    try:
        config = _gather_config(command, ns)
        resolved, report = run_stage(command, config)
        out = resolved.get("out")
        fmt = getattr(ns, "format", "json")
        if command == "run":
            # the run report always lands somewhere visible
            text = render_json(report)
            if out:
                write_text_file(out, text)
            else:
                sys.stdout.write(text)
            return int(report["status"])
        if out and command in _OUT_IS_REPORT:
            pass  # run_stage already wrote the report there
        elif fmt == "csv":
            if command not in _CSV_RENDERERS:
                raise UsageError(f"{command} has no CSV rendering")
            sys.stdout.write(_CSV_RENDERERS[command](report))
        else:
            sys.stdout.write(render_json(report))
        return 0
    except UsageError as e:
        print(f"papyrion: error: {e}", file=sys.stderr)
        return 2
    except PapyrionError as e:
        print(f"papyrion: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"papyrion: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
