"""The full grounding model: encoders, decoder, and the coordinate codec
stitched together behind one object."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from . import tensor as T
from .encoders import (EncoderConfig, Image, encode_images_batch,
                       encode_instructions_batch, fuse_batch,
                       init_encoder_params)
from .postproc import GroundingOutput, parse_grounding_sequence
from .solver import (GenerationResult, SolverConfig, generate_beam,
                     generate_greedy, init_solver_params)
from .tensor import Tensor
from .vocab import TASK_CAPTION, TASK_GROUND, CoordBinSpec, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    frame_w: int = 128
    frame_h: int = 128
    patch_size: int = 16
    d_model: int = 128
    n_heads: int = 4
    n_layers_img: int = 2
    n_layers_txt: int = 2
    n_dec_layers: int = 2
    max_instr_len: int = 16
    max_gen_len: int = 32
    num_bins: int = 256

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(patch_size=self.patch_size, d_model=self.d_model,
                             n_layers_img=self.n_layers_img,
                             n_layers_txt=self.n_layers_txt, n_heads=self.n_heads,
                             max_instr_len=self.max_instr_len)

    def solver_config(self, vocab_size: int) -> SolverConfig:
        return SolverConfig(vocab_size=vocab_size, n_dec_layers=self.n_dec_layers,
                            n_heads=self.n_heads, d_model=self.d_model,
                            max_gen_len=self.max_gen_len)

    def bin_spec(self) -> CoordBinSpec:
        return CoordBinSpec(num_bins=self.num_bins, extent_w=float(self.frame_w),
                            extent_h=float(self.frame_h))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class GroundingModel:
    """Owns parameters, vocabulary, and configuration; everything else is a
    pure function of those."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 params: dict[str, Tensor]) -> None:
        if vocab.num_bins != config.num_bins:
            raise ValueError(
                f"vocabulary has {vocab.num_bins} bins, config asks {config.num_bins}")
        self.config = config
        self.vocab = vocab
        self.params = params
        self.enc_cfg = config.encoder_config()
        self.dec_cfg = config.solver_config(vocab.size)
        self.bin_spec = config.bin_spec()

    @classmethod
    def from_seed(cls, config: ModelConfig, vocab: Vocabulary,
                  seed: int) -> "GroundingModel":
        params = init_encoder_params(config.encoder_config(), config.frame_w,
                                     config.frame_h, vocab.size,
                                     seeding.stream(seed, "init/encoder"))
        params.update(init_solver_params(config.solver_config(vocab.size),
                                         seeding.stream(seed, "init/solver")))
        return cls(config, vocab, params)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def encode_batch(self, pixels: np.ndarray, instr_ids: np.ndarray,
                     instr_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """pixels [B, H, W, 3], padded instruction ids [B, L] with validity
        mask -> fused memory [B, S, d] and its validity [B, S]."""
        img = encode_images_batch(pixels, self.enc_cfg, self.params)
        txt = encode_instructions_batch(instr_ids, instr_valid, self.enc_cfg,
                                        self.params)
        return fuse_batch(img, txt, instr_valid, self.params)

    def encode_one(self, image: Image, instruction: str) -> tuple[Tensor, np.ndarray]:
        image.validate()
        ids = self.vocab.encode_text(instruction)[:self.enc_cfg.max_instr_len]
        arr = np.asarray(ids, dtype=np.int64).reshape(1, -1)
        valid = np.ones_like(arr, dtype=bool)
        memory, mem_valid = self.encode_batch(image.pixels[None], arr, valid)
        s = memory.shape[1]
        return T.reshape(memory, (s, self.config.d_model)), mem_valid[0]

    def _generate(self, memory: Tensor, mem_valid: np.ndarray, task: int,
                  beam_width: int) -> GenerationResult:
        if beam_width <= 1:
            return generate_greedy(memory, mem_valid, task, self.dec_cfg, self.params)
        return generate_beam(memory, mem_valid, task, self.dec_cfg, self.params,
                             beam_width=beam_width)

    def predict_box(self, image: Image, instruction: str,
                    beam_width: int = 1) -> GroundingOutput:
        memory, mem_valid = self.encode_one(image, instruction)
        result = self._generate(memory, mem_valid, TASK_GROUND, beam_width)
        return parse_grounding_sequence(result.tokens, self.vocab, self.bin_spec)

    def caption(self, image: Image, instruction: str = "describe the scene",
                beam_width: int = 1) -> str:
        memory, mem_valid = self.encode_one(image, instruction)
        result = self._generate(memory, mem_valid, TASK_CAPTION, beam_width)
        return self.vocab.decode_tokens(result.tokens)
