"""Writer retrieval and identification over per-image embedding vectors.

Two evaluation protocols:

* leave-one-out retrieval: every image queries all others, ranked by cosine
  similarity; mAP and Top-k hit rates summarize the ranking quality.
* reference-based identification: a sampled combination fixes a few
  reference images per writer, every remaining image is classified by its
  best cosine score against each writer's references, and accuracy is
  averaged over many sampled combinations.

Rankings break ties deterministically (ascending image id for retrieval,
lexicographic writer label for classification), so reports are reproducible
byte for byte.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from papyrion.corpus import parse_writer_label
from papyrion.errors import PapyrionError, ParameterError

__all__ = [
    "EmbeddingIndex",
    "load_embeddings",
    "similarity_matrix",
    "average_precision",
    "retrieval_eval",
    "sample_reference_sets",
    "nn_classify_eval",
]


@dataclass(frozen=True)
class EmbeddingIndex:
    """Parallel tuples of image id, writer label, and embedding vector."""

    image_ids: tuple[str, ...]
    labels: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] < 1:
            raise ParameterError("embedding matrix must be (n, d) with n >= 1")
        if not (len(self.image_ids) == len(self.labels) == v.shape[0]):
            raise ParameterError("image ids, labels, and vectors must align")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise PapyrionError("duplicate image ids in embedding index")
        if any(not lbl for lbl in self.labels):
            raise PapyrionError("empty writer label in embedding index")
        if not np.isfinite(v).all():
            raise ParameterError("embeddings must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def writers(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, lbl in enumerate(self.labels):
            out.setdefault(lbl, []).append(i)
        return out


def load_embeddings(directory: str | Path) -> EmbeddingIndex:
    """Build an index from a directory of .npy vectors, one per image; the
    writer label is parsed from the file stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise PapyrionError(f"no such directory: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix == ".npy")
    if not paths:
        raise PapyrionError(f"no .npy embeddings in {directory}")
    ids, labels, vecs = [], [], []
    for p in paths:
        v = np.load(p)
        if v.ndim != 1:
            raise PapyrionError(f"embedding {p.name} is not a 1-D vector")
        ids.append(p.stem)
        labels.append(parse_writer_label(p.name))
        vecs.append(np.asarray(v, dtype=np.float64))
    dims = {v.shape[0] for v in vecs}
    if len(dims) != 1:
        raise PapyrionError(f"embeddings disagree on dimension: {sorted(dims)}")
    return EmbeddingIndex(tuple(ids), tuple(labels), np.stack(vecs))


def similarity_matrix(index: EmbeddingIndex) -> np.ndarray:
    """Pairwise cosine similarities. Zero vectors score 0 against
    everything, themselves included."""
    v = index.vectors
    norms = np.sqrt((v * v).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = v / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0.0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def average_precision(relevant_in_rank_order: list[bool]) -> float:
    """AP of one ranking: the mean, over relevant items, of the precision at
    that item's rank. A ranking with no relevant items has no defined AP;
    callers must not ask."""
    hits = 0
    precisions = []
    for rank, is_rel in enumerate(relevant_in_rank_order, start=1):
        if is_rel:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        raise PapyrionError("ranking contains no relevant item")
    return math.fsum(precisions) / len(precisions)


def retrieval_eval(index: EmbeddingIndex) -> dict:
    """Leave-one-out retrieval report.

    Every image queries the rest, ranked by descending cosine similarity
    with ties broken by ascending image id. Images by the query's writer are
    relevant. Reports mAP and Top-1/5/10 hit rates, all scaled to [0, 100].
    """
    for writer, members in sorted(index.writers().items()):
        if len(members) < 2:
            raise PapyrionError(
                f"writer '{writer}' has a single image; leave-one-out needs at least 2"
            )
    sim = similarity_matrix(index)
    n = index.count
    aps, top1, top5, top10 = [], 0, 0, 0
    rows = []
    for qi in range(n):
        others = [j for j in range(n) if j != qi]
        others.sort(key=lambda j: (-sim[qi, j], index.image_ids[j]))
        flags = [index.labels[j] == index.labels[qi] for j in others]
        ap = average_precision(flags)
        aps.append(ap)
        hit1 = any(flags[:1])
        hit5 = any(flags[:5])
        hit10 = any(flags[:10])
        top1 += hit1
        top5 += hit5
        top10 += hit10
        rows.append({"image": index.image_ids[qi], "ap": ap, "top1_hit": bool(hit1)})
    return {
        "map": 100.0 * math.fsum(aps) / n,
        "top1": 100.0 * top1 / n,
        "top5": 100.0 * top5 / n,
        "top10": 100.0 * top10 / n,
        "queries": n,
        "rows": rows,
    }


def sample_reference_sets(
    index: EmbeddingIndex,
    per_writer: int = 2,
    count: int = 500,
    seed: int = 0,
) -> list[dict[str, tuple[str, ...]]]:
    """Sample ``count`` distinct reference combinations.

    A combination picks ``per_writer`` reference images for every writer.
    Sampling is uniform over the product of per-writer subsets, by rejection
    of repeats, deterministic for a given seed. When ``count`` equals the
    whole space the full enumeration is returned instead. ``count`` beyond
    the space size is an error, as is a writer with too few images to leave
    a probe.
    """
    if per_writer < 1:
        raise ParameterError(f"per_writer must be >= 1, got {per_writer}")
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    writers = index.writers()
    for writer in sorted(writers):
        if len(writers[writer]) < per_writer + 1:
            raise PapyrionError(
                f"writer '{writer}' has {len(writers[writer])} images; "
                f"need at least {per_writer + 1} (references plus one probe)"
            )
    names = sorted(writers)
    pair_lists = []
    for writer in names:
        ids = sorted(index.image_ids[i] for i in writers[writer])
        pair_lists.append(list(itertools.combinations(ids, per_writer)))
    space = 1
    for pl in pair_lists:
        space *= len(pl)
    if count > space:
        raise PapyrionError(f"requested {count} combinations but only {space} exist")
    if count == space:
        return [
            dict(zip(names, combo)) for combo in itertools.product(*pair_lists)
        ]
    rng = np.random.default_rng(seed)
    seen: set[tuple] = set()
    out: list[dict[str, tuple[str, ...]]] = []
    while len(out) < count:
        picks = tuple(pl[int(rng.integers(len(pl)))] for pl in pair_lists)
        if picks in seen:
            continue
        seen.add(picks)
        out.append(dict(zip(names, picks)))
    return out


def nn_classify_eval(
    index: EmbeddingIndex,
    combinations: list[dict[str, tuple[str, ...]]],
    score_mode: str = "max",
) -> dict:
    """Nearest-reference writer identification, averaged over combinations.

    Within one combination, every non-reference image is a probe. A writer's
    score for a probe is the best (or, with score_mode="mean", the average)
    cosine similarity over that writer's references; writers are ranked by
    descending score with lexicographic tie-break. Top-1/Top-5 accuracies
    are averaged per combination; the report carries their mean and
    population standard deviation over combinations, scaled to [0, 100].
    """
    if score_mode not in ("max", "mean"):
        raise ParameterError(f"unknown score mode {score_mode!r}")
    if not combinations:
        raise PapyrionError("no reference combinations to evaluate")
    sim = similarity_matrix(index)
    id_to_idx = {img: i for i, img in enumerate(index.image_ids)}
    names = sorted(index.writers())

    top1_accs, top5_accs = [], []
    for combo in combinations:
        if sorted(combo) != names:
            raise PapyrionError("combination does not cover the writer set")
        ref_idx = {w: [id_to_idx[i] for i in combo[w]] for w in names}
        all_refs = {i for idxs in ref_idx.values() for i in idxs}
        probes = [i for i in range(index.count) if i not in all_refs]
        if not probes:
            raise PapyrionError("a combination leaves no probe images")
        hits1 = hits5 = 0
        for p in probes:
            scores = []
            for w in names:
                vals = [sim[p, r] for r in ref_idx[w]]
                s = max(vals) if score_mode == "max" else math.fsum(vals) / len(vals)
                scores.append((-s, w))
            scores.sort()
            ranked = [w for _, w in scores]
            truth = index.labels[p]
            if ranked[0] == truth:
                hits1 += 1
            if truth in ranked[:5]:
                hits5 += 1
        top1_accs.append(hits1 / len(probes))
        top5_accs.append(hits5 / len(probes))

    t1 = np.asarray(top1_accs)
    t5 = np.asarray(top5_accs)
    return {
        "top1_mean": 100.0 * float(t1.mean()),
        "top1_std": 100.0 * float(t1.std()),
        "top5_mean": 100.0 * float(t5.mean()),
        "top5_std": 100.0 * float(t5.std()),
        "combinations": len(combinations),
        "score_mode": score_mode,
        "std_convention": "population",
    }
