"""Autoregressive decoder over the fused memory.

One decoder serves both tasks; the token after BOS names the task and the
output space is the unified vocabulary, so a box prediction is nothing more
than four tokens. Generation is plain argmax or length-normalized beam search;
PAD and BOS are never eligible outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import MASK_BIAS, attention, linear, mlp
from .tensor import Tensor
from .vocab import BOS, EOS, PAD, TASK_CAPTION, TASK_GROUND


class SolverError(ValueError):
    """Raised on malformed prefixes or configuration."""


@dataclass(frozen=True)
class SolverConfig:
    vocab_size: int
    n_dec_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    max_gen_len: int = 32

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_gen_len < 6:
            raise ValueError(f"max_gen_len must be at least 6, got {self.max_gen_len}")
        if self.vocab_size < 8:
            raise ValueError("vocabulary must cover control tokens and something to say")


@dataclass
class GenerationResult:
    """Payload tokens (after BOS and the task token, EOS stripped), the sum of
    chosen log-probabilities (EOS included), and whether EOS was reached."""

    tokens: list[int]
    log_prob: float
    finished: bool


def init_solver_params(cfg: SolverConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.d_model
    p: dict[str, Tensor] = {}

    def w(name: str, shape: tuple[int, ...]) -> None:
        p[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    def norm(prefix: str) -> None:
        p[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
        p[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)

    w("dec.emb", (cfg.vocab_size, d))
    w("dec.pos", (cfg.max_gen_len, d))
    for i in range(cfg.n_dec_layers):
        prefix = f"dec.blk{i}"
        norm(f"{prefix}.ln1")
        for name in "qkvo":
            w(f"{prefix}.attn.w{name}", (d, d))
            p[f"{prefix}.attn.b{name}"] = Tensor(np.zeros(d), requires_grad=True)
        norm(f"{prefix}.lnx")
        for name in "qkvo":
            w(f"{prefix}.xattn.w{name}", (d, d))
            p[f"{prefix}.xattn.b{name}"] = Tensor(np.zeros(d), requires_grad=True)
        norm(f"{prefix}.ln2")
        w(f"{prefix}.mlp.w1", (d, 4 * d))
        p[f"{prefix}.mlp.b1"] = Tensor(np.zeros(4 * d), requires_grad=True)
        w(f"{prefix}.mlp.w2", (4 * d, d))
        p[f"{prefix}.mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)
    norm("dec.ln_f")
    w("dec.out.w", (d, cfg.vocab_size))
    p["dec.out.b"] = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
    return p


def causal_bias(t: int) -> np.ndarray:
    """[1, 1, t, t] additive mask hiding strictly-future positions."""
    return np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, MASK_BIAS)[None, None]


def memory_key_bias(valid: np.ndarray) -> np.ndarray:
    return np.where(valid[:, None, None, :], 0.0, MASK_BIAS)


def _check_prefix(prefix: np.ndarray, cfg: SolverConfig) -> None:
    b, t = prefix.shape
    if t < 2:
        raise SolverError("prefix must contain BOS and a task token")
    if t > cfg.max_gen_len:
        raise SolverError(f"prefix length {t} exceeds max_gen_len {cfg.max_gen_len}")
    if (prefix[:, 0] != BOS).any():
        raise SolverError("prefix must begin with BOS")
    if not np.isin(prefix[:, 1], (TASK_GROUND, TASK_CAPTION)).all():
        raise SolverError("second prefix token must name the task")
    if prefix.min() < 0 or prefix.max() >= cfg.vocab_size:
        raise SolverError(f"prefix id out of range for vocab {cfg.vocab_size}")


def decoder_logits_batch(memory: Tensor, memory_valid: np.ndarray, prefix: np.ndarray,
                         cfg: SolverConfig, params: dict[str, Tensor]) -> Tensor:
    """memory [B, S, d], prefix ids [B, T] -> logits [B, T, vocab]."""
    _check_prefix(prefix, cfg)
    b, t = prefix.shape
    x = T.add(T.embedding(params["dec.emb"], prefix),
              T.slice_rows(params["dec.pos"], 0, t))
    self_bias = causal_bias(t)
    cross_bias = memory_key_bias(memory_valid)
    for i in range(cfg.n_dec_layers):
        prefix_name = f"dec.blk{i}"
        h = T.layer_norm(x, params[f"{prefix_name}.ln1.g"], params[f"{prefix_name}.ln1.b"])
        x = T.add(x, attention(params, f"{prefix_name}.attn", h, h, cfg.n_heads, self_bias))
        h = T.layer_norm(x, params[f"{prefix_name}.lnx.g"], params[f"{prefix_name}.lnx.b"])
        x = T.add(x, attention(params, f"{prefix_name}.xattn", h, memory,
                               cfg.n_heads, cross_bias))
        h = T.layer_norm(x, params[f"{prefix_name}.ln2.g"], params[f"{prefix_name}.ln2.b"])
        x = T.add(x, mlp(params, prefix_name, h))
    x = T.layer_norm(x, params["dec.ln_f.g"], params["dec.ln_f.b"])
    return linear(x, params["dec.out.w"], params["dec.out.b"])


def forward_teacher_forced(memory: Tensor | np.ndarray, memory_valid: np.ndarray,
                           prefix: list[int], cfg: SolverConfig,
                           params: dict[str, Tensor]) -> Tensor:
    """Single-sample logits [T, vocab] for a teacher-forced prefix."""
    mem = memory if isinstance(memory, Tensor) else Tensor(memory)
    s, d = mem.shape
    logits = decoder_logits_batch(
        T.reshape(mem, (1, s, d)), np.asarray(memory_valid, dtype=bool).reshape(1, s),
        np.asarray(prefix, dtype=np.int64).reshape(1, -1), cfg, params)
    return T.reshape(logits, (len(prefix), cfg.vocab_size))


def _next_log_probs(memory: Tensor, memory_valid: np.ndarray, prefix: list[int],
                    cfg: SolverConfig, params: dict[str, Tensor]) -> np.ndarray:
    logits = decoder_logits_batch(
        memory, memory_valid, np.asarray(prefix, dtype=np.int64)[None],
        cfg, params).data[0, -1].copy()
    logits[PAD] = -np.inf
    logits[BOS] = -np.inf
    m = logits.max()
    return logits - (m + math.log(np.exp(logits - m).sum()))


def generate_greedy(memory: Tensor | np.ndarray, memory_valid: np.ndarray, task_token: int,
                    cfg: SolverConfig, params: dict[str, Tensor]) -> GenerationResult:
    """Argmax decoding from [BOS, task]; ties resolve to the lowest id."""
    mem, valid = _as_memory(memory, memory_valid)
    prefix = [BOS, int(task_token)]
    _check_prefix(np.asarray(prefix)[None], cfg)
    log_prob = 0.0
    while len(prefix) < cfg.max_gen_len:
        lp = _next_log_probs(mem, valid, prefix, cfg, params)
        token = int(np.argmax(lp))
        log_prob += float(lp[token])
        if token == EOS:
            return GenerationResult(prefix[2:], log_prob, True)
        prefix.append(token)
    return GenerationResult(prefix[2:], log_prob, False)


def generate_beam(memory: Tensor | np.ndarray, memory_valid: np.ndarray, task_token: int,
                  cfg: SolverConfig, params: dict[str, Tensor],
                  beam_width: int = 4) -> GenerationResult:
    """Length-normalized beam search; beam_width=1 reproduces greedy exactly."""
    if beam_width < 1:
        raise SolverError(f"beam_width must be positive, got {beam_width}")
    mem, valid = _as_memory(memory, memory_valid)
    prefix = [BOS, int(task_token)]
    _check_prefix(np.asarray(prefix)[None], cfg)
    # beam entry: (payload tuple, summed log prob, steps taken, finished)
    beams: list[tuple[tuple[int, ...], float, int, bool]] = [((), 0.0, 0, False)]
    while True:
        candidates: list[tuple[tuple[int, ...], float, int, bool]] = []
        expanded = False
        for payload, score, steps, finished in beams:
            if finished or 2 + len(payload) >= cfg.max_gen_len:
                candidates.append((payload, score, steps, finished))
                continue
            expanded = True
            lp = _next_log_probs(mem, valid, prefix + list(payload), cfg, params)
            order = np.lexsort((np.arange(lp.size), -lp))[:beam_width]
            for token in order:
                token = int(token)
                if token == EOS:
                    candidates.append((payload, score + lp[token], steps + 1, True))
                else:
                    candidates.append((payload + (token,), score + lp[token], steps + 1, False))
        if not expanded:
            beams = candidates
            break
        candidates.sort(key=lambda c: (-(c[1] / c[2]), c[0]))
        beams = candidates[:beam_width]
        if all(c[3] for c in beams):
            break
    best = min(beams, key=lambda c: (-(c[1] / max(c[2], 1)), c[0]))
    return GenerationResult(list(best[0]), best[1], best[3])


def _as_memory(memory: Tensor | np.ndarray, valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
    mem = memory if isinstance(memory, Tensor) else Tensor(memory)
    if mem.data.ndim == 2:
        s, d = mem.shape
        mem = T.reshape(mem, (1, s, d))
    valid = np.asarray(valid, dtype=bool).reshape(1, -1)
    return mem, valid
