"""Corpus bookkeeping: image/GT pairing, writer labels, checksums, manifests.

An experiment manifest is a JSON file with a seed and an ordered list of
stages, each naming a CLI subcommand and its configuration. Running the same
manifest twice produces byte-identical outputs: nothing here consults clocks,
hostnames, or directory iteration order.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from papyrion.errors import PapyrionError

__all__ = [
    "fnv1a64",
    "file_checksum",
    "PairRow",
    "DatasetManifest",
    "ingest_pairs",
    "parse_writer_label",
    "load_experiment_manifest",
    "run_manifest",
]

log = logging.getLogger("papyrion.corpus")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def file_checksum(path: str | Path) -> str:
    """FNV-1a of the file contents, as a 16-digit hex string."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise PapyrionError(f"no such file: {path}") from None
    return f"{fnv1a64(data):016x}"


_IMAGE_EXTS = {".png", ".pgm", ".ppm"}


@dataclass(frozen=True)
class PairRow:
    stem: str
    image: str
    gt: str | None
    image_checksum: str
    gt_checksum: str | None


@dataclass
class DatasetManifest:
    dataset_id: str
    split_id: str
    rows: list[PairRow]
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "split_id": self.split_id,
            "rows": [
                {
                    "stem": r.stem,
                    "image": r.image,
                    "gt": r.gt,
                    "image_checksum": r.image_checksum,
                    "gt_checksum": r.gt_checksum,
                }
                for r in self.rows
            ],
            "warnings": list(self.warnings),
        }


def _stems(directory: Path) -> dict[str, Path]:
    """Map casefolded stem -> path; duplicate stems keep the lexicographically
    first file and are reported."""
    out: dict[str, Path] = {}
    dups: list[str] = []
    for p in sorted(directory.iterdir()):
        if not p.is_file() or p.suffix.lower() not in _IMAGE_EXTS:
            continue
        key = p.stem.casefold()
        if key in out:
            dups.append(p.name)
            continue
        out[key] = p
    for name in dups:
        log.warning("duplicate stem ignored: %s", name)
    return out


def ingest_pairs(
    image_dir: str | Path,
    gt_dir: str | Path | None = None,
    dataset_id: str = "",
    split_id: str = "",
) -> DatasetManifest:
    """Pair images with ground truths by stem (case-insensitive, extension
    blind), sorted lexicographically. Unpaired files on either side become
    warnings; zero pairs is an error."""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise PapyrionError(f"no such directory: {image_dir}")
    images = _stems(image_dir)
    warnings: list[str] = []
    rows: list[PairRow] = []

    if gt_dir is None:
        for stem in sorted(images):
            p = images[stem]
            rows.append(PairRow(stem, str(p), None, file_checksum(p), None))
    else:
        gt_dir = Path(gt_dir)
        if not gt_dir.is_dir():
            raise PapyrionError(f"no such directory: {gt_dir}")
        gts = _stems(gt_dir)
        for stem in sorted(images):
            if stem in gts:
                ip, gp = images[stem], gts[stem]
                rows.append(
                    PairRow(stem, str(ip), str(gp), file_checksum(ip), file_checksum(gp))
                )
            else:
                warnings.append(f"unpaired image: {images[stem].name}")
        for stem in sorted(set(gts) - set(images)):
            warnings.append(f"unpaired ground truth: {gts[stem].name}")

    for msg in warnings:
        log.warning("%s", msg)
    if not rows:
        raise PapyrionError("no image pairs found")
    return DatasetManifest(dataset_id=dataset_id, split_id=split_id, rows=rows, warnings=warnings)


_LABEL_RE = re.compile(r"^(.+)_\d+$")


def parse_writer_label(filename: str) -> str:
    """Writer label from a filename: the stem minus one trailing
    "_<digits>" group ("Menas_1.png" -> "Menas"). Stems without the group
    are used whole, with a warning."""
    stem = Path(filename).stem
    m = _LABEL_RE.match(stem)
    if m:
        return m.group(1)
    log.warning("filename %r has no trailing _<digits> group; using whole stem as writer", filename)
    return stem


# ---------------------------------------------------------------------------
# experiment manifests


def load_experiment_manifest(path: str | Path) -> dict:
    """Parse and validate an experiment manifest file.

    Schema: {"seed": int (optional), "stages": [{"id": str, "run": str,
    "config": {...}}, ...]}. Stage ids must be unique, stage names must be
    known subcommands, and config keys must be known for that subcommand.
    Validation failures raise before anything runs.
    """
    from papyrion import cli  # deferred: cli imports the domain modules

    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PapyrionError(f"no such manifest: {path}") from None
    except json.JSONDecodeError as e:
        raise PapyrionError(f"manifest is not valid JSON: {e}") from None

    if not isinstance(data, dict) or not isinstance(data.get("stages"), list):
        raise PapyrionError("manifest must be an object with a 'stages' list")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise PapyrionError("manifest seed must be an integer")

    seen_ids = set()
    for i, stage in enumerate(data["stages"]):
        if not isinstance(stage, dict):
            raise PapyrionError(f"stage {i} is not an object")
        sid = stage.get("id")
        if not isinstance(sid, str) or not sid:
            raise PapyrionError(f"stage {i} is missing an id")
        if sid in seen_ids:
            raise PapyrionError(f"duplicate stage id {sid!r}")
        seen_ids.add(sid)
        name = stage.get("run")
        if name not in cli.RUNNERS or name == "run":
            raise PapyrionError(f"stage {sid!r} names unknown subcommand {name!r}")
        config = stage.get("config", {})
        if not isinstance(config, dict):
            raise PapyrionError(f"stage {sid!r} config must be an object")
        unknown = set(config) - cli.CONFIG_KEYS[name]
        if unknown:
            raise PapyrionError(
                f"stage {sid!r} has unknown config keys: {', '.join(sorted(unknown))}"
            )
    return data


def run_manifest(manifest: dict | str | Path, threads: int = 1) -> tuple[int, list[dict]]:
    """Execute the stages of a validated manifest in order.

    Each stage runs the same code path as its CLI subcommand, with the
    manifest seed as default. A failing stage halts everything downstream;
    the returned status is 0 only if every stage completed. Stage summaries
    (id, subcommand, resolved config, status) come back for the run report.
    """
    from papyrion import cli

    if not isinstance(manifest, dict):
        manifest = load_experiment_manifest(manifest)
    seed = manifest.get("seed", 0)

    stage_reports: list[dict] = []
    status = 0
    for stage in manifest["stages"]:
        name = stage["run"]
        config = dict(stage.get("config", {}))
        config.setdefault("seed", seed)
        config.setdefault("threads", threads)
        entry = {"id": stage["id"], "run": name, "config": None, "status": "pending"}
        try:
            resolved, report = cli.run_stage(name, config)
            entry["config"] = resolved
            entry["status"] = "ok"
            entry["report"] = report
        except PapyrionError as e:
            entry["config"] = config
            entry["status"] = f"failed: {e}"
            stage_reports.append(entry)
            status = 1
            log.error("stage %s failed: %s", stage["id"], e)
            break
        stage_reports.append(entry)
    return status, stage_reports
