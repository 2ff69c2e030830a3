"""Autoregressive sampling with temperature and nucleus (top-p) filtering."""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import KVCache, ModelConfig, forward
from .seqdata import DEFAULT_VOCAB, Direction, Vocabulary

DEFAULT_TEMPERATURES = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_TOP_PS = (0.5, 0.7, 0.9, 1.0)


class SamplerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 1024
    prompt: str = ""
    direction: Direction = Direction.N2C
    seed: int = 0
    use_cache: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise SamplerConfigError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise SamplerConfigError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise SamplerConfigError("max_new_tokens must be >= 1")
        object.__setattr__(self, "direction", Direction(self.direction))


@dataclass
class GeneratedRecord:
    residues: str
    config: SamplerConfig
    log_probs: list[float]
    termination: str  # "stop-token" | "max-length"
    id: str = ""
    cell: tuple[float, float] | None = None

    @property
    def mean_log_prob(self) -> float:
        return float(np.mean(self.log_probs)) if self.log_probs else float("nan")


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise SamplerConfigError("temperature must be > 0")
    return np.asarray(logits, dtype=np.float64) / temperature


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest top set whose mass reaches ``p``; renormalise.

    Tokens are ranked by probability, ties broken by lower index first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 < p <= 1:
        raise SamplerConfigError("top_p must be in (0, 1]")
    if p >= 1.0:
        return probs / probs.sum()
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    # tolerate float error in the running sum so mass exactly p counts as reached
    n_keep = int(np.searchsorted(cum, p * (1 - 1e-12), side="left")) + 1
    n_keep = min(n_keep, probs.size)
    out = np.zeros_like(probs)
    keep = order[:n_keep]
    out[keep] = probs[keep]
    return out / out.sum()


def sampling_distribution(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    return nucleus_filter(softmax(apply_temperature(logits, temperature)), top_p)


def draw(probs: np.ndarray, rng: np.random.Generator, size: int | None = None):
    """Inverse-CDF draw(s) from a categorical distribution."""
    cdf = np.cumsum(probs)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, probs.size - 1)


def _banned_ids(vocab: Vocabulary, direction: Direction) -> list[int]:
    # never emit padding or the opening marker after generation has started
    return [vocab.pad_id, vocab.index[direction.start_token]]


def generate(
    params: Mapping[str, np.ndarray],
    model_config: ModelConfig,
    config: SamplerConfig,
    vocab: Vocabulary = DEFAULT_VOCAB,
) -> GeneratedRecord:
    """Sample one sequence.

    The context starts with the direction's opening marker followed by the
    prompt. ``config.prompt`` is written in N->C order; for C2N generation it
    is the C-terminal end and is fed reversed. Returned residues are always
    N->C. Recorded log-probs are the model's untempered ln p of each sampled
    token.
    """
    direction = config.direction
    prompt = config.prompt.upper()
    bad = [c for c in prompt if c not in vocab.residues]
    if bad:
        raise SamplerConfigError(f"prompt contains residues outside the vocabulary: {sorted(set(bad))}")
    body = prompt if direction is Direction.N2C else prompt[::-1]
    context = [vocab.index[direction.start_token], *vocab.encode(body)]
    if len(context) >= model_config.context_len:
        raise SamplerConfigError("prompt does not fit in the model context")
    stop_id = vocab.index[direction.stop_token]
    banned = _banned_ids(vocab, direction)
    rng = np.random.default_rng(config.seed)
    budget = min(config.max_new_tokens, model_config.context_len - len(context))

    cache = KVCache() if config.use_cache else None
    tokens = list(context)
    new: list[int] = []
    log_probs: list[float] = []
    termination = "max-length"
    pending = np.asarray(tokens, dtype=np.int64)
    for _ in range(budget):
        if cache is not None:
            logits = forward(params, model_config, pending[None, :], cache).logits.data[0, -1]
        else:
            logits = forward(params, model_config, np.asarray(tokens)[None, :]).logits.data[0, -1]
        logits = np.asarray(logits, dtype=np.float64)
        raw = logits - logits.max()
        raw_logp = raw - np.log(np.exp(raw).sum())
        masked = logits.copy()
        masked[banned] = -np.inf
        probs = sampling_distribution(masked, config.temperature, config.top_p)
        tok = int(draw(probs, rng))
        log_probs.append(float(raw_logp[tok]))
        tokens.append(tok)
        if tok == stop_id:
            termination = "stop-token"
            break
        new.append(tok)
        pending = np.asarray([tok], dtype=np.int64)

    residues = body + "".join(vocab.decode(new))
    if direction is Direction.C2N:
        residues = residues[::-1]
    return GeneratedRecord(residues, config, log_probs, termination)


def cell_seed(base_seed: int, temperature: float, top_p: float, index: int) -> int:
    """Stable 64-bit seed for one sweep draw."""
    payload = struct.pack("<qddq", int(base_seed), float(temperature), float(top_p), int(index))
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def sweep(
    params: Mapping[str, np.ndarray],
    model_config: ModelConfig,
    temperatures: Sequence[float],
    top_ps: Sequence[float],
    n_per_cell: int,
    base: SamplerConfig | None = None,
    vocab: Vocabulary = DEFAULT_VOCAB,
    threads: int = 1,
) -> list[GeneratedRecord]:
    """Generate ``n_per_cell`` sequences for every (temperature, top_p) pair."""
    if not temperatures or not top_ps:
        raise SamplerConfigError("temperature and top_p sets must be non-empty")
    base = base or SamplerConfig()
    jobs = []
    for t in temperatures:
        for p in top_ps:
            for i in range(n_per_cell):
                jobs.append((t, p, i, replace(base, temperature=t, top_p=p, seed=cell_seed(base.seed, t, p, i))))

    def run(job):
        t, p, i, cfg = job
        rec = generate(params, model_config, cfg, vocab)
        rec.cell = (t, p)
        rec.id = f"gen_T{t:g}_P{p:g}_{i:05d}"
        return rec

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def dedupe(records: Iterable[GeneratedRecord]) -> list[GeneratedRecord]:
    """Drop exact duplicate residue strings, keeping first occurrences."""
    seen: set[str] = set()
    out = []
    for r in records:
        if r.residues not in seen:
            seen.add(r.residues)
            out.append(r)
    return out


def fasta_header(rec: GeneratedRecord) -> str:
    c = rec.config
    return f"{rec.id}|T={c.temperature:g}|P={c.top_p:g}|seed={c.seed}|term={rec.termination}"


def library_fasta(records: Iterable[GeneratedRecord]) -> str:
    out = io.StringIO()
    for r in records:
        out.write(f">{fasta_header(r)}\n")
        for i in range(0, len(r.residues), 62):
            out.write(r.residues[i : i + 62] + "\n")
    return out.getvalue()


def library_csv(records: Iterable[GeneratedRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "temperature", "top_p", "seed", "termination", "length", "mean_log_prob"])
    for r in records:
        c = r.config
        w.writerow([r.id, c.temperature, c.top_p, c.seed, r.termination, len(r.residues), repr(r.mean_log_prob)])
    return out.getvalue()
