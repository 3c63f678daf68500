"""Full network assembly.

One class wires the pieces: patch embedding (with the learnable mask
token for masked pretraining), four mixer stages joined by patch merges,
the clinical-prior encoder and fusion at the configured stage, the task
heads, and the pixel decoder. The same parameters serve both training
phases; only the routing and which heads are read differ:

* pretraining: fixed label-guided routing, no priors, decoder output.
* fine-tuning: one forward per task with that task's gate in every
  mixture-of-experts layer, priors fused in, per-task head on the pooled
  final tokens.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .backbone import (M3ADBlock, PatchEmbed, PatchMerge, StagePlan, WindowAttention,
                       build_stage_plan)
from .config import ModelConfig
from .errors import ContractError, ShapeError
from .heads_losses import MaskSpec, ReconDecoder, TaskHeads, apply_mask
from .moe import MMoELayer, Routing, class_only_weights, fixed_routing, label_guided_weights, task_routing
from .numerics import Module, Tensor, parameter
from .priors import Fusion, PriorEncoder, c_fusion_dim
from .tokmlp import TokMLPBlock

_ATTENTION_STAGES = (0, 1)


class M3ADNet(Module):
    """The complete network. Construction is deterministic in ``seed``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.np_dtype = np.float32 if cfg.dtype == "float32" else np.float64
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        dt = self.np_dtype

        self.patch_embed = PatchEmbed(rng, cfg.patch_size, cfg.embed_dim, dt)
        self.mask_token = parameter(rng, (cfg.embed_dim,), dt, name="mask_token")

        self.blocks: list[M3ADBlock] = []
        self._stage_of_block: list[int] = []
        for stage in range(4):
            dim = cfg.stage_dim(stage)
            for depth in range(cfg.depths[stage]):
                if stage in _ATTENTION_STAGES:
                    mixer = WindowAttention(rng, dim, cfg.num_heads[stage], cfg.window, dt)
                else:
                    mixer = TokMLPBlock(rng, dim, dt)
                moe = MMoELayer(rng, dim, cfg.num_experts, cfg.num_shared_experts,
                                cfg.expert_hidden_ratio, cfg.gate_temp, dt)
                self.blocks.append(M3ADBlock(mixer, moe, dim, dt,
                                             shifted=bool(depth % 2), window=cfg.window))
                self._stage_of_block.append(stage)
        self.merges = [PatchMerge(rng, cfg.stage_dim(s), dt) for s in range(3)]

        fdim = c_fusion_dim(cfg.embed_dim, cfg.fusion_stage)
        self.prior_encoder = PriorEncoder(rng, fdim, dt)
        self.fusion = Fusion(rng, cfg.fusion_type, fdim, dt)

        final_dim = cfg.stage_dim(3)
        self.heads = TaskHeads(rng, final_dim, cfg.num_change_classes, dt)
        self.decoder = ReconDecoder(rng, final_dim, cfg.patch_size * 8, dt)

    # -- plumbing ------------------------------------------------------

    def stage_plan(self, image_hw: tuple[int, int]) -> StagePlan:
        return build_stage_plan(self.cfg, image_hw)

    def _as_input(self, images) -> Tensor:
        if isinstance(images, Tensor):
            arr = images
        else:
            arr = Tensor(np.asarray(images, dtype=self.np_dtype))
        if arr.ndim != 3:
            raise ShapeError(f"expected images (B, H, W), got shape {arr.shape}")
        return arr

    def encode(self, images, routing: Routing, priors: np.ndarray | None = None,
               specs: list[MaskSpec] | None = None,
               trace: list | None = None) -> Tensor:
        """Run the backbone; returns the final (B, h, w, 8C) grid.

        ``priors`` (B, 3), already normalized, switches fusion on;
        ``specs`` applies masked-pretraining token substitution;
        ``trace`` collects (stage, (h, w), channels) after each stage's
        blocks for shape auditing.
        """
        x = self.patch_embed(self._as_input(images))
        if specs is not None:
            x = apply_mask(x, specs, self.mask_token, self.cfg.patch_size)
        clinical = None
        if priors is not None:
            priors = np.asarray(priors, dtype=self.np_dtype)
            clinical = self.prior_encoder(Tensor(priors))
        block_idx = 0
        for stage in range(4):
            for _ in range(self.cfg.depths[stage]):
                x = self.blocks[block_idx](x, routing)
                block_idx += 1
            if trace is not None:
                trace.append((stage, (x.shape[1], x.shape[2]), x.shape[3]))
            if stage < 3:
                x = self.merges[stage](x)
            if stage == self.cfg.fusion_stage and clinical is not None:
                b, h, w, c = x.shape
                tokens = nm.reshape(x, (b, h * w, c))
                x = nm.reshape(self.fusion(tokens, clinical), (b, h, w, c))
        return x

    # -- pretraining forwards ------------------------------------------

    def reconstruct_label_guided(self, images, labels: np.ndarray,
                                 specs: list[MaskSpec]) -> Tensor:
        weights = label_guided_weights(np.asarray(labels), self.cfg.num_experts,
                                       self.cfg.num_shared_experts,
                                       self.cfg.shared_expert_weight, self.np_dtype)
        grid = self.encode(images, fixed_routing(weights), specs=specs)
        return self.decoder(grid)

    def reconstruct_class_only(self, images, klass: int,
                               specs: list[MaskSpec]) -> Tensor:
        weights = class_only_weights(klass, self.cfg.num_experts,
                                     self.cfg.num_shared_experts, self.np_dtype)
        grid = self.encode(images, fixed_routing(weights), specs=specs)
        return self.decoder(grid)

    # -- fine-tuning forwards ------------------------------------------

    def task_logits(self, images, priors: np.ndarray, task: str) -> Tensor:
        """One task pass: that task's gates route every MMoE layer and
        that task's head reads the pooled final tokens."""
        grid = self.encode(images, task_routing(task), priors=priors)
        b, h, w, c = grid.shape
        return self.heads.logits(nm.reshape(grid, (b, h * w, c)), task)

    def dual_task_logits(self, images, priors: np.ndarray) -> tuple[Tensor, Tensor]:
        """Both passes of the dual-pass design, sharing all parameters."""
        return (self.task_logits(images, priors, "diagnosis"),
                self.task_logits(images, priors, "change"))

    # -- parameter views -----------------------------------------------

    def gate_parameter_names(self) -> list[str]:
        """Names of every gate-path parameter (task gates and the shared
        feature attention), across all mixture layers."""
        return [name for name in self.named_parameters()
                if ".moe.feature_attn." in name or ".moe.gate_" in name]

    def expert_parameter_names(self, expert: int) -> list[str]:
        if not 0 <= expert < self.cfg.num_experts:
            raise ContractError(f"expert index {expert} out of range")
        tag = f".moe.experts.{expert}."
        return [name for name in self.named_parameters() if tag in name]

    def attention_temperatures(self) -> list[np.ndarray]:
        """Effective per-head tau of every attention block."""
        return [blk.mixer.tau for blk in self.blocks
                if isinstance(blk.mixer, WindowAttention)]
