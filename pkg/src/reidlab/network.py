"""Toy two-branch embedding network.

Pipeline: three pooled conv blocks, an optional early channel-attention
insertion whose output feeds block 3, a fourth block without pooling,
then parallel branches sharing that trunk:

  global:    block5g -> T_g -> GAP -> reduction -> k_g vector
  attentive: block5a -> channel reduction -> T_a
             -> [channel attention, position attention] over T_a
             -> concat(T_a, cam_out, pam_out) -> channel reduction
             -> GAP -> k_a vector

The final embedding concatenates both vectors; a single linear classifier
produces identity logits from it. The post-concat reduction exists
because concatenation multiplies channels: pooling straight to k_a dims
is impossible without it.

Activation-penalty sites: the early attention output (block-2 output when
channel attention is disabled), T_a, and each branch attention output —
four sites in the full configuration.

Weight-penalty registration covers the six block convs (backbone plus the
two branch blocks); reduction layers are linear projections and attention
heads belong to their modules, so neither is registered.

Parameters live in a name -> array dict; each training step plants them
as tape leaves. Batch-norm running statistics are buffers, not
parameters: they update during training-mode forwards regardless of the
freeze schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import BN_EPS, BN_MOMENTUM, HeadVars, cam_apply, pam_apply
from .errors import ContractError, ShapeError
from .ortho import SvdoConfig, WeightMatrixView, draw_q0, of_penalty_batch_t, ow_penalty_t
from .rng import sub_rng, sub_seed
from .tape import Tape, Var
from .tensor import Tensor, from_bytes, to_bytes

DROPOUT_DEFAULT = 0.5


@dataclass(frozen=True)
class VariantSpec:
    """Ablation flags; all false is the cross-entropy baseline."""
    use_pam: bool = False
    use_cam: bool = False
    use_of: bool = False
    use_ow: bool = False
    use_triplet: bool = False

    FLAGS = ("pam", "cam", "of", "ow", "triplet")

    @classmethod
    def full(cls) -> "VariantSpec":
        return cls(True, True, True, True, True)

    @classmethod
    def from_flags(cls, flags: str) -> "VariantSpec":
        flags = flags.strip()
        if flags in ("", "none", "baseline"):
            return cls()
        if flags in ("all", "full"):
            return cls.full()
        chosen = [f.strip() for f in flags.replace("+", ",").split(",") if f.strip()]
        unknown = [f for f in chosen if f not in cls.FLAGS]
        if unknown:
            raise ContractError(f"unknown variant flag(s): {','.join(unknown)}")
        return cls(**{f"use_{f}": True for f in chosen})

    @property
    def label(self) -> str:
        on = [f for f in self.FLAGS if getattr(self, f"use_{f}")]
        return "+".join(on) if on else "baseline"


@dataclass(frozen=True)
class BackboneConfig:
    block_widths: tuple = (16, 32, 64, 128)
    branch_width: int = 128
    input_shape: tuple = (3, 48, 16)
    reduction_dim: int = 96       # attentive-branch channel reduction
    dropout: float = DROPOUT_DEFAULT

    def __post_init__(self):
        if len(self.block_widths) != 4 or min(self.block_widths) < 1:
            raise ContractError("need four positive block widths")
        if self.branch_width < 1:
            raise ContractError("branch width must be positive")
        c, h, w = self.input_shape
        if min(c, h, w) < 1 or h % 8 or w % 8:
            raise ContractError("input spatial dims must be divisible by 8 (three pools)")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class EmbeddingSpec:
    k_a: int = 64
    k_g: int = 64

    def __post_init__(self):
        if self.k_a < 1 or self.k_g < 1:
            raise ContractError("embedding dims must be positive")

    @property
    def final_dim(self) -> int:
        return self.k_a + self.k_g


@dataclass
class ForwardResult:
    embeddings: Var               # (B, k_a + k_g)
    logits: Var                   # (B, num_classes)
    of_terms: dict                # site name -> scalar Var (beta excluded)
    activations: dict             # site name -> Var feature map


class TwoBranchNet:
    """Parameter store plus the differentiable forward pass."""

    def __init__(self, backbone: BackboneConfig, embedding: EmbeddingSpec,
                 variant: VariantSpec, num_classes: int, seed: int = 0,
                 svdo: SvdoConfig | None = None):
        if num_classes < 2:
            raise ContractError("need at least two identity classes")
        self.backbone = backbone
        self.embedding = embedding
        self.variant = variant
        self.num_classes = num_classes
        self.svdo = svdo or SvdoConfig()
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.backbone_names: set[str] = set()
        self.conv_weight_names: list[str] = []  # weight-penalty registry
        self._init_params(sub_rng(seed, "init"))

    # ------------------------------------------------------------ parameters

    def _he_conv(self, rng, out_c, in_c, k):
        fan_in = in_c * k * k
        return rng.normal(scale=np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))

    def _add_block(self, name, rng, in_c, out_c, k=3, backbone=True, register=True):
        self.params[f"{name}.conv"] = self._he_conv(rng, out_c, in_c, k)
        self.params[f"{name}.bn_scale"] = np.ones(out_c)
        self.params[f"{name}.bn_shift"] = np.zeros(out_c)
        self.buffers[f"{name}.bn_mean"] = np.zeros(out_c)
        self.buffers[f"{name}.bn_var"] = np.ones(out_c)
        if backbone:
            self.backbone_names.update(
                {f"{name}.conv", f"{name}.bn_scale", f"{name}.bn_shift"})
        if register:
            self.conv_weight_names.append(f"{name}.conv")

    def _add_reduction(self, name, rng, in_dim, out_dim, kind):
        if out_dim >= in_dim:
            raise ContractError(f"reduction {name} must shrink: {in_dim} -> {out_dim}")
        if kind == "map":  # 1x1 conv over channels
            self.params[f"{name}.conv"] = self._he_conv(rng, out_dim, in_dim, 1)
        else:              # plain linear on vectors
            self.params[f"{name}.w"] = rng.normal(
                scale=np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
            self.params[f"{name}.b"] = np.zeros(out_dim)
        self.params[f"{name}.bn_scale"] = np.ones(out_dim)
        self.params[f"{name}.bn_shift"] = np.zeros(out_dim)
        self.buffers[f"{name}.bn_mean"] = np.zeros(out_dim)
        self.buffers[f"{name}.bn_var"] = np.ones(out_dim)

    def _init_params(self, rng):
        widths = self.backbone.block_widths
        in_c = self.backbone.input_shape[0]
        self._add_block("block1", rng, in_c, widths[0])
        self._add_block("block2", rng, widths[0], widths[1])
        self._add_block("block3", rng, widths[1], widths[2])
        self._add_block("block4", rng, widths[2], widths[3])
        self._add_block("block5a", rng, widths[3], self.backbone.branch_width)
        self._add_block("block5g", rng, widths[3], self.backbone.branch_width)

        red = self.backbone.reduction_dim
        self._add_reduction("red_attn", rng, self.backbone.branch_width, red, "map")
        concat_c = red * (1 + int(self.variant.use_cam) + int(self.variant.use_pam))
        self._add_reduction("red_concat", rng, concat_c, self.embedding.k_a, "map")
        self._add_reduction("red_global", rng, self.backbone.branch_width,
                            self.embedding.k_g, "vec")

        if self.variant.use_cam:
            self.params["cam_early.gamma"] = np.zeros(())
            self.params["cam_branch.gamma"] = np.zeros(())
        if self.variant.use_pam:
            self.params["pam.gamma"] = np.zeros(())
            for head in ("q", "k", "v"):
                self.params[f"pam.{head}.conv"] = self._he_conv(rng, red, red, 1)
                self.params[f"pam.{head}.bn_scale"] = np.ones(red)
                self.params[f"pam.{head}.bn_shift"] = np.zeros(red)
                self.buffers[f"pam.{head}.bn_mean"] = np.zeros(red)
                self.buffers[f"pam.{head}.bn_var"] = np.ones(red)

        self.params["classifier.w"] = rng.normal(
            scale=0.01, size=(self.num_classes, self.embedding.final_dim))
        self.params["classifier.b"] = np.zeros(self.num_classes)

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def trainable_names(self, stage: int) -> list[str]:
        """Stage 1 freezes the backbone; stage 2 trains everything."""
        if stage == 1:
            return [n for n in self.param_names() if n not in self.backbone_names]
        return self.param_names()

    # --------------------------------------------------------------- forward

    def _block(self, tape, leaves, name, x, *, pool, training, update_stats):
        h = ops.conv2d(x, leaves[f"{name}.conv"], pad=self.params[f"{name}.conv"].shape[-1] // 2)
        h = ops.batchnorm(h, leaves[f"{name}.bn_scale"], leaves[f"{name}.bn_shift"],
                          training=training,
                          running_mean=self.buffers[f"{name}.bn_mean"],
                          running_var=self.buffers[f"{name}.bn_var"],
                          eps=BN_EPS, momentum=BN_MOMENTUM, update_stats=update_stats)
        h = ops.relu(h)
        return ops.maxpool2(h) if pool else h

    def _dropout(self, tape, x, training, rng):
        rate = self.backbone.dropout
        if not training or rate == 0.0 or rng is None:
            return x
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return ops.mul_const(x, mask)

    def _map_reduction(self, tape, leaves, name, x, *, training, update_stats, rng):
        h = ops.conv2d(x, leaves[f"{name}.conv"], pad=0)
        h = ops.batchnorm(h, leaves[f"{name}.bn_scale"], leaves[f"{name}.bn_shift"],
                          training=training,
                          running_mean=self.buffers[f"{name}.bn_mean"],
                          running_var=self.buffers[f"{name}.bn_var"],
                          eps=BN_EPS, momentum=BN_MOMENTUM, update_stats=update_stats)
        h = ops.relu(h)
        return self._dropout(tape, h, training, rng)

    def _vec_reduction(self, tape, leaves, name, x, *, training, update_stats, rng):
        h = ops.linear(x, leaves[f"{name}.w"], leaves[f"{name}.b"])
        h = ops.batchnorm(h, leaves[f"{name}.bn_scale"], leaves[f"{name}.bn_shift"],
                          training=training,
                          running_mean=self.buffers[f"{name}.bn_mean"],
                          running_var=self.buffers[f"{name}.bn_var"],
                          eps=BN_EPS, momentum=BN_MOMENTUM, update_stats=update_stats)
        h = ops.relu(h)
        return self._dropout(tape, h, training, rng)

    def _pam_heads(self, leaves) -> list[HeadVars]:
        heads = []
        for head in ("q", "k", "v"):
            heads.append(HeadVars(
                weight=leaves[f"pam.{head}.conv"],
                bn_scale=leaves[f"pam.{head}.bn_scale"],
                bn_shift=leaves[f"pam.{head}.bn_shift"],
                bn_mean=self.buffers[f"pam.{head}.bn_mean"],
                bn_var=self.buffers[f"pam.{head}.bn_var"],
            ))
        return heads

    def plant_leaves(self, tape: Tape) -> dict[str, Var]:
        return {name: tape.leaf(arr) for name, arr in self.params.items()}

    def forward(self, tape: Tape, images, leaves: dict[str, Var] | None = None, *,
                training: bool = False, dropout_rng=None, want_of: bool = False,
                update_stats: bool = True, svdo_seed: int | None = None) -> ForwardResult:
        """Run the network over a (B,C,H,W) batch (array or Var)."""
        if leaves is None:
            leaves = self.plant_leaves(tape)
        x = images if isinstance(images, Var) else tape.const(
            np.asarray(images, dtype=np.float64))
        if x.shape[1:] != tuple(self.backbone.input_shape):
            raise ShapeError(
                f"expected images shaped {self.backbone.input_shape}, got {x.shape[1:]}")
        kw = dict(training=training, update_stats=update_stats)
        svdo_seed = self.svdo.seed if svdo_seed is None else svdo_seed

        of_terms: dict[str, Var] = {}
        activations: dict[str, Var] = {}

        def of_site(name, var):
            activations[name] = var
            if want_of:
                q0 = draw_q0(var.shape[1], sub_seed(svdo_seed, "of-site", name))
                of_terms[name] = of_penalty_batch_t(tape, var, self.svdo, q0)

        h = self._block(tape, leaves, "block1", x, pool=True, **kw)
        h = self._block(tape, leaves, "block2", h, pool=True, **kw)
        if self.variant.use_cam:
            h, _ = cam_apply(tape, h, leaves["cam_early.gamma"])
        of_site("early", h)  # measured where block 3 reads its input
        h = self._block(tape, leaves, "block3", h, pool=True, **kw)
        trunk = self._block(tape, leaves, "block4", h, pool=False, **kw)

        # global branch
        t_g = self._block(tape, leaves, "block5g", trunk, pool=False, **kw)
        activations["t_g"] = t_g
        v_g = ops.gap_hw(t_g)
        v_g = self._vec_reduction(tape, leaves, "red_global", v_g,
                                  rng=dropout_rng, **kw)

        # attentive branch
        h_a = self._block(tape, leaves, "block5a", trunk, pool=False, **kw)
        t_a = self._map_reduction(tape, leaves, "red_attn", h_a,
                                  rng=dropout_rng, **kw)
        of_site("t_a", t_a)
        parts = [t_a]
        if self.variant.use_cam:
            cam_out, _ = cam_apply(tape, t_a, leaves["cam_branch.gamma"])
            of_site("branch_cam", cam_out)
            parts.append(cam_out)
        if self.variant.use_pam:
            pam_out, _ = pam_apply(tape, t_a, leaves["pam.gamma"],
                                   self._pam_heads(leaves), training=training,
                                   update_stats=update_stats)
            of_site("branch_pam", pam_out)
            parts.append(pam_out)
        merged = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
        prepool = self._map_reduction(tape, leaves, "red_concat", merged,
                                      rng=dropout_rng, **kw)
        activations["attentive_prepool"] = prepool
        v_a = ops.gap_hw(prepool)

        emb = ops.concat([v_a, v_g], axis=1)
        logits = ops.linear(emb, leaves["classifier.w"], leaves["classifier.b"])
        if want_of:
            expected = 2 + int(self.variant.use_cam) + int(self.variant.use_pam)
            assert len(of_terms) == expected, "activation-penalty site count drifted"
        return ForwardResult(embeddings=emb, logits=logits,
                             of_terms=of_terms, activations=activations)

    # ------------------------------------------------------- weight penalty

    def weight_views(self) -> list[WeightMatrixView]:
        return [WeightMatrixView.from_conv(self.params[n]) for n in self.conv_weight_names]

    def ow_term(self, tape: Tape, leaves: dict[str, Var],
                svdo_seed: int | None = None, q0s: list | None = None,
                return_qs: bool = False):
        """Differentiable weight penalty over the registered convs (beta excluded)."""
        cfg = self.svdo
        weight_vars = [leaves[n] for n in self.conv_weight_names]
        if q0s is None:
            seed = sub_seed(cfg.seed if svdo_seed is None else svdo_seed, "ow")
            rng = np.random.default_rng(seed)
            q0s = []
            for name in self.conv_weight_names:
                dim = int(np.prod(self.params[name].shape[1:]))
                q = rng.normal(size=dim)
                q0s.append(q / np.linalg.norm(q))
        return ow_penalty_t(tape, weight_vars, cfg, q0s, return_qs=return_qs)

    # ----------------------------------------------------------- checkpoints

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v for k, v in self.params.items()}
        state.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, arr in state.items():
            scope, name = key.split("/", 1)
            target = self.params if scope == "param" else self.buffers
            if name not in target:
                raise ContractError(f"unknown state entry {key}")
            if target[name].shape != arr.shape:
                raise ShapeError(f"{key}: shape {arr.shape} != {target[name].shape}")
            target[name] = arr.copy()


def save_checkpoint(model: TwoBranchNet, directory) -> None:
    """Binary tensor blobs plus a plain-text manifest (name, shape, offset)."""
    import os
    os.makedirs(directory, exist_ok=True)
    blob_path = os.path.join(directory, "checkpoint.bin")
    manifest_path = os.path.join(directory, "checkpoint.manifest")
    state = model.state_arrays()
    offset = 0
    lines = []
    with open(blob_path, "wb") as fh:
        for name in sorted(state):
            arr = state[name]
            shaped = arr.reshape(arr.shape if arr.ndim else (1,))
            raw = to_bytes(Tensor(shaped))
            shape_txt = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
            lines.append(f"{name} {shape_txt} {offset}")
            fh.write(raw)
            offset += len(raw)
    with open(manifest_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    import os
    with open(os.path.join(directory, "checkpoint.bin"), "rb") as fh:
        blob = fh.read()
    state = {}
    with open(os.path.join(directory, "checkpoint.manifest")) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, shape_txt, offset = line.rsplit(" ", 2)
            tensor, _ = from_bytes(blob, int(offset))
            if shape_txt == "scalar":
                state[name] = tensor.data.reshape(())
            else:
                shape = tuple(int(d) for d in shape_txt.split(","))
                state[name] = tensor.data.reshape(shape)
    return state
