"""Protein sequence ingestion, tokenization, packing, clustering and splits."""

from __future__ import annotations

import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = "<pad>"
N_TERM = "1"
C_TERM = "2"
CANONICAL = "ACDEFGHIKLMNPQRSTVWY"
RARE = "BZXUO"
RESIDUES = CANONICAL + RARE
FASTA_WIDTH = 62


class FastaError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SplitError(ValueError):
    pass


class Direction(str, enum.Enum):
    N2C = "N2C"
    C2N = "C2N"

    def flipped(self) -> "Direction":
        return Direction.C2N if self is Direction.N2C else Direction.N2C

    @property
    def start_token(self) -> str:
        return N_TERM if self is Direction.N2C else C_TERM

    @property
    def stop_token(self) -> str:
        return C_TERM if self is Direction.N2C else N_TERM


class Vocabulary:
    """Ordered token list: PAD=0, '1'=1, '2'=2, then residue codes."""

    def __init__(self, residues: str = RESIDUES):
        self.tokens: list[str] = [PAD, N_TERM, C_TERM, *residues]
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.residues = residues

    pad_id = 0
    n_term_id = 1
    c_term_id = 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, chars: Iterable[str]) -> list[int]:
        return [self.index[c] for c in chars]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if list(tokens[:3]) != [PAD, N_TERM, C_TERM]:
            raise ValueError("vocabulary must start with PAD, '1', '2'")
        return cls("".join(tokens[3:]))


DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    residues: str
    source: str | None = None

    def __post_init__(self):
        if not self.residues:
            raise ValueError(f"record {self.id!r} has no residues")


@dataclass(frozen=True)
class TokenizedSequence:
    tokens: tuple[int, ...]
    direction: Direction
    record_id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


def clean_residues(seq: str, vocab: Vocabulary = DEFAULT_VOCAB, *, strict: bool = False) -> tuple[str, int]:
    """Uppercase and map unknown characters to 'X'. Returns (residues, n_replaced)."""
    seq = "".join(seq.split()).upper()
    allowed = set(vocab.residues)
    bad = [c for c in seq if c not in allowed]
    if bad and strict:
        raise ValueError(f"unknown residues {sorted(set(bad))}")
    if not bad:
        return seq, 0
    return "".join(c if c in allowed else "X" for c in seq), len(bad)


def parse_fasta(stream: IO | bytes | str, vocab: Vocabulary = DEFAULT_VOCAB) -> list[SequenceRecord]:
    """Parse FASTA text. Wrapped sequence lines are joined; unknown residues become 'X'."""
    if isinstance(stream, (bytes, str)):
        text = stream.decode("utf-8") if isinstance(stream, bytes) else stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    records: list[SequenceRecord] = []
    header: str | None = None
    header_line = 0
    chunks: list[str] = []
    replaced = 0

    def flush():
        nonlocal replaced
        if header is None:
            return
        residues, n = clean_residues("".join(chunks), vocab)
        if not residues:
            raise FastaError(f"record {header!r} has no sequence", header_line)
        replaced += n
        rec_id, _, rest = header.partition(" ")
        records.append(SequenceRecord(rec_id, residues, rest or None))

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].strip()
            header_line = lineno
            chunks = []
        elif header is None:
            raise FastaError("sequence data before first header", lineno)
        else:
            chunks.append(line)
    flush()
    if replaced:
        log.warning("mapped %d unknown residue characters to 'X'", replaced)
    return records


def read_fasta(path: str | Path, vocab: Vocabulary = DEFAULT_VOCAB) -> list[SequenceRecord]:
    with open(path, "rb") as fh:
        return parse_fasta(fh, vocab)


def format_fasta(records: Iterable[SequenceRecord], width: int = FASTA_WIDTH) -> str:
    out = io.StringIO()
    for r in records:
        header = r.id if not r.source else f"{r.id} {r.source}"
        out.write(f">{header}\n")
        for i in range(0, len(r.residues), width):
            out.write(r.residues[i : i + width] + "\n")
    return out.getvalue()


def write_fasta(records: Iterable[SequenceRecord], path: str | Path, width: int = FASTA_WIDTH) -> None:
    Path(path).write_text(format_fasta(records, width))


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------


def tokenize(
    record: SequenceRecord | str,
    direction: Direction | str = Direction.N2C,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> TokenizedSequence:
    """N2C gives ['1', residues..., '2']; C2N gives ['2', reversed residues..., '1']."""
    direction = Direction(direction)
    rec_id = record.id if isinstance(record, SequenceRecord) else ""
    residues = record.residues if isinstance(record, SequenceRecord) else record
    try:
        body = vocab.encode(residues)
    except KeyError as exc:
        raise ValueError(f"residue {exc.args[0]!r} not in vocabulary") from None
    ids = [vocab.n_term_id, *body, vocab.c_term_id]
    if direction is Direction.C2N:
        ids.reverse()
    return TokenizedSequence(tuple(ids), direction, rec_id)


def detokenize(t: TokenizedSequence, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Residues in N->C order, markers stripped."""
    ids = list(t.tokens)
    if t.direction is Direction.C2N:
        ids.reverse()
    if len(ids) < 2 or ids[0] != vocab.n_term_id or ids[-1] != vocab.c_term_id:
        raise ValueError("tokenized sequence lacks terminal markers")
    return "".join(vocab.decode(ids[1:-1]))


def flip(t: TokenizedSequence) -> TokenizedSequence:
    return TokenizedSequence(tuple(reversed(t.tokens)), t.direction.flipped(), t.record_id)


def augment(records: Iterable[SequenceRecord], vocab: Vocabulary = DEFAULT_VOCAB) -> list[TokenizedSequence]:
    """Every record as-is (N2C) followed by its flipped (C2N) copy."""
    out = []
    for r in records:
        t = tokenize(r, Direction.N2C, vocab)
        out.extend((t, flip(t)))
    return out


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


@dataclass
class PackedBatch:
    """Rows of concatenated sequences.

    ``boundaries[r]`` lists ``(start, end, record_id, direction)`` slices of
    ``inputs[r]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    boundaries: list[list[tuple[int, int, str, str]]] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return int(self.loss_mask.sum())

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def rows(self, idx: Sequence[int] | slice) -> "PackedBatch":
        if isinstance(idx, slice):
            bounds = self.boundaries[idx]
        else:
            idx = list(idx)
            bounds = [self.boundaries[i] for i in idx]
        return PackedBatch(self.inputs[idx], self.targets[idx], self.loss_mask[idx], bounds)

    @classmethod
    def from_inputs(cls, inputs: np.ndarray, boundaries, pad_id: int = 0) -> "PackedBatch":
        """Rebuild targets and loss mask from a stored input matrix."""
        inputs = np.asarray(inputs, dtype=np.int32)
        targets = np.full_like(inputs, pad_id)
        targets[:, :-1] = inputs[:, 1:]
        return cls(inputs, targets, (inputs != pad_id) & (targets != pad_id), list(boundaries))

    def split(self, batch_rows: int) -> list["PackedBatch"]:
        return [self.rows(slice(i, i + batch_rows)) for i in range(0, len(self), batch_rows)]


def _make_batch(rows: list[list[int]], bounds, context_len: int, pad_id: int) -> PackedBatch:
    inputs = np.full((len(rows), context_len), pad_id, dtype=np.int32)
    for r, row in enumerate(rows):
        inputs[r, : len(row)] = row
    return PackedBatch.from_inputs(inputs, bounds, pad_id)


def pack(
    sequences: Sequence[TokenizedSequence],
    context_len: int,
    policy: str = "truncate",
    pad_id: int = 0,
) -> PackedBatch:
    """Greedy first-fit packing of whole sequences into rows of ``context_len``.

    Sequences never straddle rows. Oversized sequences are truncated (with a
    warning) or skipped according to ``policy``.
    """
    if policy not in ("truncate", "skip"):
        raise ValueError(f"unknown oversize policy {policy!r}")
    rows: list[list[int]] = []
    bounds: list[list[tuple[int, int, str, str]]] = []
    oversize = 0
    for seq in sequences:
        toks = list(seq.tokens)
        if len(toks) > context_len:
            oversize += 1
            if policy == "skip":
                continue
            toks = toks[:context_len]
        for r, row in enumerate(rows):
            if len(row) + len(toks) <= context_len:
                break
        else:
            rows.append([])
            bounds.append([])
            r = len(rows) - 1
        start = len(rows[r])
        rows[r].extend(toks)
        bounds[r].append((start, start + len(toks), seq.record_id, seq.direction.value))
    if oversize:
        verb = "skipped" if policy == "skip" else "truncated"
        log.warning("%s %d sequences longer than context_len=%d", verb, oversize, context_len)
    return _make_batch(rows, bounds, context_len, pad_id)


def unpack(batch: PackedBatch) -> list[TokenizedSequence]:
    out = []
    for r, row_bounds in enumerate(batch.boundaries):
        for start, end, rec_id, direction in row_bounds:
            out.append(TokenizedSequence(tuple(int(x) for x in batch.inputs[r, start:end]), Direction(direction), rec_id))
    return out


# ---------------------------------------------------------------------------
# identity and clustering
# ---------------------------------------------------------------------------


def sequence_identity(a: str, b: str) -> float:
    """Matches in an optimal global alignment divided by max(len(a), len(b)).

    Scoring is match=1, mismatch=0, linear gap=-1; among equally scoring
    alignments the one with most matches is used. Both objectives fold into
    one integer score (match=W+1, gap=-W with W > max length), which lets
    each DP row be solved with a running maximum.
    """
    if not a or not b:
        raise ValueError("sequence_identity needs non-empty sequences")
    if len(a) < len(b):
        a, b = b, a
    w = len(a) + 1
    xa = np.frombuffer(a.encode(), dtype=np.uint8)
    xb = np.frombuffer(b.encode(), dtype=np.uint8)
    cols = np.arange(len(b) + 1, dtype=np.int64)
    prev = -w * cols
    for i in range(1, len(a) + 1):
        sub = np.where(xb == xa[i - 1], w + 1, 0)
        t = np.empty_like(prev)
        t[0] = -w * i
        t[1:] = np.maximum(prev[:-1] + sub, prev[1:] - w)
        # horizontal gaps: row[j] = max_k<=j (t[k] - w*(j-k))
        prev = np.maximum.accumulate(t + w * cols) - w * cols
    matches = int(prev[-1] % w)
    return matches / len(a)


@dataclass
class Clustering:
    representatives: list[str]
    assignments: dict[str, str]
    identities: dict[str, float]

    def members(self, rep_id: str) -> list[str]:
        return [m for m, r in self.assignments.items() if r == rep_id]

    def to_tsv(self) -> str:
        lines = [f"{rep}\t{m}\t{self.identities[m]:.6f}" for m, rep in self.assignments.items()]
        return "\n".join(lines) + ("\n" if lines else "")


def cluster_greedy(records: Sequence[SequenceRecord], threshold: float) -> Clustering:
    """Greedy incremental clustering (longest first).

    A record joins the first representative it matches at identity >=
    threshold, otherwise it founds a new cluster. Ties in length keep input
    order.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    order = sorted(range(len(records)), key=lambda i: -len(records[i].residues))
    reps: list[SequenceRecord] = []
    assignments: dict[str, str] = {}
    identities: dict[str, float] = {}
    for i in order:
        rec = records[i]
        for rep in reps:
            # identity <= min/max length ratio, skip hopeless pairs cheaply
            if len(rec.residues) < threshold * len(rep.residues):
                continue
            ident = sequence_identity(rec.residues, rep.residues)
            if ident >= threshold:
                assignments[rec.id] = rep.id
                identities[rec.id] = ident
                break
        else:
            reps.append(rec)
            assignments[rec.id] = rec.id
            identities[rec.id] = 1.0
    # preserve input order in the assignment table
    ordered = {r.id: assignments[r.id] for r in records}
    return Clustering([r.id for r in reps], ordered, {k: identities[k] for k in ordered})


@dataclass(frozen=True)
class SplitSpec:
    identity_threshold: float = 0.5
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.identity_threshold <= 1:
            raise ValueError("identity_threshold must be in (0, 1]")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")


@dataclass
class Split:
    spec: SplitSpec
    train: list[SequenceRecord]
    heldout: list[SequenceRecord]
    excluded: list[SequenceRecord]
    clustering: Clustering

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "train": [r.id for r in self.train],
            "heldout": [r.id for r in self.heldout],
            "excluded": [r.id for r in self.excluded],
        }

    def manifest_text(self) -> str:
        return json.dumps(self.manifest(), indent=1) + "\n"


def make_split(records: Sequence[SequenceRecord], spec: SplitSpec) -> Split:
    """Hold out whole clusters at ``spec.identity_threshold``.

    Clusters are shuffled with ``spec.seed`` and ``holdout_fraction`` of them
    (at least one, never all) go to the held-out side. Held-out records that
    still reach the threshold against any training record are moved to
    ``excluded`` so that no train/held-out pair is that similar.
    """
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise SplitError("record ids must be unique")
    clustering = cluster_greedy(records, spec.identity_threshold)
    reps = clustering.representatives
    if len(reps) < 2:
        raise SplitError(f"need at least 2 clusters to split, found {len(reps)}")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(reps))
    n_out = min(len(reps) - 1, max(1, int(round(spec.holdout_fraction * len(reps)))))
    held_reps = {reps[i] for i in order[:n_out]}

    train = [r for r in records if clustering.assignments[r.id] not in held_reps]
    candidates = [r for r in records if clustering.assignments[r.id] in held_reps]
    heldout, excluded = [], []
    for h in candidates:
        leak = any(
            len(h.residues) >= spec.identity_threshold * len(t.residues)
            and len(t.residues) >= spec.identity_threshold * len(h.residues)
            and sequence_identity(h.residues, t.residues) >= spec.identity_threshold
            for t in train
        )
        (excluded if leak else heldout).append(h)
    if excluded:
        log.info("excluded %d held-out records too similar to training data", len(excluded))
    return Split(spec, train, heldout, excluded, clustering)
