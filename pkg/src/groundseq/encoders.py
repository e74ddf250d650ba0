"""Image and instruction encoders plus modality fusion.

Both encoders are pre-norm transformer stacks over the same width so their
outputs concatenate directly into one memory sequence. The image side sees
non-overlapping square patches with learned row/column position embeddings;
the text side sees word ids with learned 1-D positions. Fusion adds a
per-modality type embedding and concatenates; order inside the memory carries
no positional meaning of its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_BIAS = -1e30  # additive key bias; exp underflows to exactly zero weight


class EncoderError(ValueError):
    """Raised on malformed encoder inputs (frame, length, id range)."""


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    d_model: int = 128
    n_layers_img: int = 2
    n_layers_txt: int = 2
    n_heads: int = 4
    max_instr_len: int = 16

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.patch_size, self.d_model, self.n_heads, self.max_instr_len) < 1:
            raise ValueError("encoder dimensions must be positive")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


@dataclass
class Image:
    """Row-major RGB pixels in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray

    def validate(self) -> None:
        if self.pixels.shape != (self.height, self.width, 3):
            raise EncoderError(
                f"pixel array {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3")
        if not np.isfinite(self.pixels).all():
            raise EncoderError("image contains non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise EncoderError("pixel values must lie in [0, 1]")


def patchify(img: Image, patch_size: int) -> np.ndarray:
    """Image to [n_patches, patch*patch*3] rows, patches in row-major order."""
    img.validate()
    if img.height % patch_size or img.width % patch_size:
        raise EncoderError(
            f"frame {img.width}x{img.height} not divisible by patch {patch_size}")
    return _patchify_batch(img.pixels[None], patch_size)[0]


def unpatchify(patches: np.ndarray, width: int, height: int, patch_size: int) -> Image:
    """Exact inverse of patchify."""
    gh, gw = height // patch_size, width // patch_size
    grid = patches.reshape(gh, gw, patch_size, patch_size, 3)
    pixels = grid.transpose(0, 2, 1, 3, 4).reshape(height, width, 3)
    return Image(width=width, height=height, pixels=pixels)


def _patchify_batch(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w, _ = pixels.shape
    gh, gw = h // patch_size, w // patch_size
    grid = pixels.reshape(b, gh, patch_size, gw, patch_size, 3)
    return grid.transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch_size * patch_size * 3)


def init_encoder_params(cfg: EncoderConfig, frame_w: int, frame_h: int,
                        vocab_size: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh encoder parameters; weights N(0, 0.02), norms identity."""
    if frame_w % cfg.patch_size or frame_h % cfg.patch_size:
        raise EncoderError(
            f"frame {frame_w}x{frame_h} not divisible by patch {cfg.patch_size}")
    d = cfg.d_model
    p = {}

    def w(name: str, shape: tuple[int, ...]) -> None:
        p[name] = Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    def norm(prefix: str) -> None:
        p[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
        p[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)

    def block(prefix: str) -> None:
        norm(f"{prefix}.ln1")
        for name in "qkvo":
            w(f"{prefix}.attn.w{name}", (d, d))
            p[f"{prefix}.attn.b{name}"] = Tensor(np.zeros(d), requires_grad=True)
        norm(f"{prefix}.ln2")
        w(f"{prefix}.mlp.w1", (d, cfg.d_ff))
        p[f"{prefix}.mlp.b1"] = Tensor(np.zeros(cfg.d_ff), requires_grad=True)
        w(f"{prefix}.mlp.w2", (cfg.d_ff, d))
        p[f"{prefix}.mlp.b2"] = Tensor(np.zeros(d), requires_grad=True)

    w("img.proj.w", (cfg.patch_size * cfg.patch_size * 3, d))
    p["img.proj.b"] = Tensor(np.zeros(d), requires_grad=True)
    w("img.pos_row", (frame_h // cfg.patch_size, d))
    w("img.pos_col", (frame_w // cfg.patch_size, d))
    for i in range(cfg.n_layers_img):
        block(f"img.blk{i}")

    w("txt.emb", (vocab_size, d))
    w("txt.pos", (cfg.max_instr_len, d))
    for i in range(cfg.n_layers_txt):
        block(f"txt.blk{i}")

    w("fuse.type_img", (1, d))
    w("fuse.type_txt", (1, d))
    return p


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [..., d_in] @ weight [d_in, d_out] + bias, batched over leading dims."""
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1])) if len(lead) != 1 else x
    out = T.add(T.matmul(flat, weight), bias)
    if len(lead) != 1:
        out = T.reshape(out, lead + (weight.shape[1],))
    return out


def attention(params: dict[str, Tensor], prefix: str, x_q: Tensor, x_kv: Tensor,
              n_heads: int, key_bias: np.ndarray | None) -> Tensor:
    """Multi-head scaled dot-product attention; key_bias broadcasts onto the
    [B, heads, Tq, Tk] score array (0 keeps, MASK_BIAS removes)."""
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dh = d // n_heads

    def heads(x: Tensor, name: str, t: int) -> Tensor:
        h = linear(x, params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"])
        return T.transpose(T.reshape(h, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(x_q, "q", tq)
    k = heads(x_kv, "k", tk)
    v = heads(x_kv, "v", tk)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_bias is not None:
        scores = T.add(scores, Tensor(key_bias))
    weights = T.softmax(scores, axis=-1)
    mixed = T.transpose(T.matmul(weights, v), (0, 2, 1, 3))
    return linear(T.reshape(mixed, (b, tq, d)), params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def encoder_block(params: dict[str, Tensor], prefix: str, x: Tensor,
                  n_heads: int, key_bias: np.ndarray | None) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = T.add(x, attention(params, f"{prefix}.attn", h, h, n_heads, key_bias))
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return T.add(x, mlp(params, prefix, h))


def mlp(params: dict[str, Tensor], prefix: str, h: Tensor) -> Tensor:
    h = linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])
    return linear(T.gelu(h), params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def encode_images_batch(pixels: np.ndarray, cfg: EncoderConfig,
                        params: dict[str, Tensor]) -> Tensor:
    """pixels [B, H, W, 3] in [0, 1] -> patch embeddings [B, P, d]."""
    _, h, w, _ = pixels.shape
    gh = params["img.pos_row"].shape[0]
    gw = params["img.pos_col"].shape[0]
    if h != gh * cfg.patch_size or w != gw * cfg.patch_size:
        raise EncoderError(
            f"image {w}x{h} does not match expected frame "
            f"{gw * cfg.patch_size}x{gh * cfg.patch_size}")
    patches = _patchify_batch(pixels, cfg.patch_size)
    x = linear(Tensor(patches), params["img.proj.w"], params["img.proj.b"])
    rows = np.repeat(np.arange(gh), gw)
    cols = np.tile(np.arange(gw), gh)
    pos = T.add(T.embedding(params["img.pos_row"], rows),
                T.embedding(params["img.pos_col"], cols))
    x = T.add(x, pos)
    for i in range(cfg.n_layers_img):
        x = encoder_block(params, f"img.blk{i}", x, cfg.n_heads, None)
    return x


def encode_image(img: Image, cfg: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    img.validate()
    out = encode_images_batch(img.pixels[None], cfg, params)
    return T.reshape(out, (out.shape[1], cfg.d_model))


def instruction_key_bias(valid: np.ndarray) -> np.ndarray:
    """[B, L] validity to additive bias [B, 1, 1, L]."""
    return np.where(valid[:, None, None, :], 0.0, MASK_BIAS)


def encode_instructions_batch(ids: np.ndarray, valid: np.ndarray, cfg: EncoderConfig,
                              params: dict[str, Tensor]) -> Tensor:
    """ids [B, L] with validity mask -> token embeddings [B, L, d].

    PAD columns are excluded from attention keys, so embeddings at valid
    positions do not depend on the amount of trailing padding.
    """
    b, length = ids.shape
    if length > cfg.max_instr_len:
        raise EncoderError(
            f"instruction length {length} exceeds max_instr_len {cfg.max_instr_len}")
    vocab_size = params["txt.emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise EncoderError(f"instruction id out of range for vocab {vocab_size}")
    if length == 0:
        return Tensor(np.zeros((b, 0, cfg.d_model)))
    x = T.add(T.embedding(params["txt.emb"], ids),
              T.slice_rows(params["txt.pos"], 0, length))
    bias = instruction_key_bias(valid)
    for i in range(cfg.n_layers_txt):
        x = encoder_block(params, f"txt.blk{i}", x, cfg.n_heads, bias)
    return x


def encode_instruction(ids: list[int], cfg: EncoderConfig,
                       params: dict[str, Tensor]) -> Tensor:
    arr = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    valid = np.ones_like(arr, dtype=bool)
    out = encode_instructions_batch(arr, valid, cfg, params)
    return T.reshape(out, (len(ids), cfg.d_model))


def fuse_batch(img_emb: Tensor, txt_emb: Tensor, txt_valid: np.ndarray,
               params: dict[str, Tensor]) -> tuple[Tensor, np.ndarray]:
    """Concatenate modality blocks (image first) with type embeddings added;
    returns the memory and a validity mask over its positions."""
    if img_emb.shape[-1] != txt_emb.shape[-1]:
        raise EncoderError(
            f"modality widths differ: {img_emb.shape[-1]} vs {txt_emb.shape[-1]}")
    b, n_patches, _ = img_emb.shape
    img_part = T.add(img_emb, params["fuse.type_img"])
    if txt_emb.shape[1] == 0:
        memory = img_part
    else:
        txt_part = T.add(txt_emb, params["fuse.type_txt"])
        memory = T.concat([img_part, txt_part], axis=1)
    valid = np.concatenate(
        [np.ones((b, n_patches), dtype=bool), txt_valid.astype(bool)], axis=1)
    return memory, valid


def fuse_modalities(img_emb: Tensor, instr_emb: Tensor,
                    params: dict[str, Tensor]) -> tuple[Tensor, np.ndarray]:
    """Single-sample fusion: [P, d] and [L, d] -> ([P+L, d], validity [P+L])."""
    p, d = img_emb.shape
    length = instr_emb.shape[0]
    memory, valid = fuse_batch(
        T.reshape(img_emb, (1, p, d)),
        T.reshape(instr_emb, (1, length, d)) if length else Tensor(np.zeros((1, 0, d))),
        np.ones((1, length), dtype=bool), params)
    return T.reshape(memory, (p + length, d)), valid[0]
