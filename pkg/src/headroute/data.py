"""Datasets: a TSV loader with whitespace tokens and a synthetic cluster task."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")


class DataError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens: list[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def from_file(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path):
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n", encoding="utf-8")


@dataclass
class Dataset:
    ids: np.ndarray  # (n, L) int64, column 0 is [CLS]
    mask: np.ndarray  # (n, L) int64, prefix of ones
    labels: np.ndarray  # (n,) int64
    name: str = "dataset"

    def __len__(self):
        return len(self.labels)

    def subset(self, rows) -> "Dataset":
        return Dataset(self.ids[rows], self.mask[rows], self.labels[rows], self.name)


def encode_text(text: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    toks = [CLS] + [vocab.id(t) for t in text.split()]
    toks = toks[:max_len]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(toks)] = toks
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: len(toks)] = 1
    return ids, mask


def load_tsv(path, vocab: Vocab, max_len: int) -> Dataset:
    """Read ``label<TAB>text`` lines; [CLS] is prepended, then truncate/pad."""
    ids, masks, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'label<TAB>text'")
            try:
                y = int(label)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {label!r} is not an integer") from None
            if y < 0:
                raise DataError(f"{path}:{lineno}: negative label {y}")
            i, m = encode_text(text, vocab, max_len)
            ids.append(i)
            masks.append(m)
            labels.append(y)
    if not labels:
        return Dataset(np.zeros((0, max_len), np.int64), np.zeros((0, max_len), np.int64),
                       np.zeros(0, np.int64), str(path))
    return Dataset(np.stack(ids), np.stack(masks), np.asarray(labels, np.int64), str(path))


def save_tsv(dataset: Dataset, vocab: Vocab, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ids, mask, y in zip(dataset.ids, dataset.mask, dataset.labels):
            toks = [vocab.itos[t] for t in ids[1 : int(mask.sum())]]
            fh.write(f"{int(y)}\t{' '.join(toks)}\n")


@dataclass
class SyntheticTaskSpec:
    n_clusters: int = 4
    n_classes: int = 4
    vocab_size: int = 64
    seq_len: int = 16
    n_train: int = 1024
    n_valid: int = 256
    seed: int = 0
    min_content: int = 6

    def __post_init__(self):
        if self.n_clusters < self.n_classes:
            raise DataError("n_clusters must be >= n_classes")
        if self.n_classes < 1:
            raise DataError("n_classes must be >= 1")
        if (self.vocab_size - len(RESERVED)) // self.n_clusters < 4:
            raise DataError(
                f"vocab_size={self.vocab_size} too small for {self.n_clusters} disjoint "
                "sub-vocabularies (need a trigram plus at least one noise token each)"
            )
        if not 4 <= self.min_content <= self.seq_len - 1:
            raise DataError("need 4 <= min_content <= seq_len - 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_vocab(spec: SyntheticTaskSpec) -> Vocab:
    return Vocab([f"w{i}" for i in range(len(RESERVED), spec.vocab_size)])


def cluster_layout(spec: SyntheticTaskSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per cluster: (signature trigram, noise tokens), all drawn from its own slice."""
    rng = np.random.default_rng([spec.seed, 2])
    per = (spec.vocab_size - len(RESERVED)) // spec.n_clusters
    sigs, noise = [], []
    for c in range(spec.n_clusters):
        sub = np.arange(len(RESERVED) + c * per, len(RESERVED) + (c + 1) * per)
        sub = rng.permutation(sub)
        sigs.append(sub[:3])
        noise.append(np.sort(sub[3:]))
    return sigs, noise


def _generate(spec: SyntheticTaskSpec, n: int, stream: int, name: str) -> Dataset:
    sigs, noise = cluster_layout(spec)
    rng = np.random.default_rng([spec.seed, stream])
    clusters_of = [list(range(c, spec.n_clusters, spec.n_classes)) for c in range(spec.n_classes)]
    seen = [0] * spec.n_classes
    L = spec.seq_len
    ids = np.full((n, L), PAD, dtype=np.int64)
    mask = np.zeros((n, L), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        y = i % spec.n_classes
        cands = clusters_of[y]
        c = cands[seen[y] % len(cands)]
        seen[y] += 1
        length = int(rng.integers(spec.min_content, L))  # content tokens, excludes [CLS]
        content = rng.choice(noise[c], size=length)
        at = int(rng.integers(0, length - 2))
        content[at : at + 3] = sigs[c]
        ids[i, 0] = CLS
        ids[i, 1 : 1 + length] = content
        mask[i, : 1 + length] = 1
        labels[i] = y
    return Dataset(ids, mask, labels, name)


def gen_cluster_task(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset]:
    """Train and validation splits of the cluster task, from separate seed streams."""
    return (
        _generate(spec, spec.n_train, 0, "synthetic-train"),
        _generate(spec, spec.n_valid, 1, "synthetic-valid"),
    )


def batches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Reshuffle per (seed, epoch); the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        rows = order[start : start + batch_size]
        yield dataset.ids[rows], dataset.mask[rows], dataset.labels[rows]
