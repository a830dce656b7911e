"""Miniature encoder-decoder transformer with trainable attention prefixes.

Every attention site (encoder self, decoder self, decoder cross) prepends
per-layer trainable prefix keys/values ahead of the input-derived keys.
The backbone (embeddings, projections, layer norms) and the prefix bank
form a disjoint parameter partition so the backbone can be frozen during
prefix-tuning. Blocks are pre-norm; positions use fixed sinusoids.

Batched forward packs examples along a leading axis, so all examples in
one call must share source/target lengths and segment structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, InputError
from .masks import (
    AttentionDesign,
    BLOCKING_DESIGNS,
    BlockSpec,
    LayerSchedule,
    SegmentMap,
    allocate_prefixes,
    causal_mask,
    restrict_prefix_columns,
    uniform_block_mask,
)
from .sparsity import AttentionTransform, NoiseStream, SparsityConfig, compose_design

ATTENTION_SITES = ("enc", "dec_self", "dec_cross")


@dataclass(frozen=True)
class ModelConfig:
    n_layers_enc: int = 4
    n_layers_dec: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 64
    vocab_size: int = 128
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("n_layers_enc", "n_layers_dec", "n_heads", "d_model",
                     "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def sinusoidal_positions(n_positions: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None].astype(np.float64)
    dim = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
    enc = np.empty((n_positions, d_model))
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    return enc


@dataclass(frozen=True)
class ParamPartition:
    """Disjoint split of parameter names into backbone and prefix sets."""

    backbone: frozenset[str]
    prefixes: frozenset[str]


class PrefixBank:
    """Per-site, per-layer prefix key/value parameters with a layer schedule.

    Each selected layer of each attention site owns a key tensor and a value
    tensor of shape [P, d_model]; unselected layers have P = 0.
    """

    def __init__(self, config: ModelConfig, prefix_length: int,
                 schedule: LayerSchedule, rng: np.random.Generator,
                 init_scale: float = 0.3):
        if prefix_length < 0:
            raise ConfigError("prefix_length must be >= 0")
        self.prefix_length = prefix_length
        self.schedule = schedule
        self.lengths: dict[str, list[int]] = {}
        self.tensors: dict[str, ad.Tensor] = {}
        depth = {"enc": config.n_layers_enc, "dec_self": config.n_layers_dec,
                 "dec_cross": config.n_layers_dec}
        for site in ATTENTION_SITES:
            n_layers = depth[site]
            selected = schedule.selected(n_layers) if prefix_length > 0 \
                else [False] * n_layers
            self.lengths[site] = [prefix_length if sel else 0 for sel in selected]
            for layer, p in enumerate(self.lengths[site]):
                if p == 0:
                    continue
                for role in ("k", "v"):
                    name = f"prefix/{site}/{layer}/{role}"
                    self.tensors[name] = ad.parameter(
                        rng.normal(0.0, init_scale, size=(p, config.d_model)))

    def length(self, site: str, layer: int) -> int:
        return self.lengths[site][layer]

    def slice(self, site: str, layer: int) -> tuple[ad.Tensor | None, ad.Tensor | None]:
        if self.length(site, layer) == 0:
            return None, None
        return (self.tensors[f"prefix/{site}/{layer}/k"],
                self.tensors[f"prefix/{site}/{layer}/v"])

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def attention_with_prefix(
    q: ad.Tensor,
    k_in: ad.Tensor,
    v_in: ad.Tensor,
    prefix_k: ad.Tensor | None,
    prefix_v: ad.Tensor | None,
    mask: np.ndarray,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Single-head scaled dot-product attention over (prefix + input) keys.

    Returns the context vectors and the attention matrix [T, P+T] for
    diagnostics. With no prefix this is vanilla attention.
    """
    t, d = q.shape
    p = 0 if prefix_k is None else prefix_k.shape[0]
    if mask.shape != (t, p + k_in.shape[0]):
        raise DimensionError(f"mask {mask.shape} does not match "
                             f"[{t}, {p + k_in.shape[0]}]")
    keys = ad.concat([prefix_k, k_in], axis=0) if p else k_in
    values = ad.concat([prefix_v, v_in], axis=0) if p else v_in
    scores = ad.scale(ad.matmul(q, ad.swap_last2(keys)), 1.0 / math.sqrt(d))
    attn = ad.masked_softmax(scores, mask)
    return ad.matmul(attn, values), attn


class AttentionPlanner:
    """Builds per-layer masks and sparse transforms for a design configuration.

    Encoder layers get full AttentionTransforms (blocking plus optional
    sparsity); decoder self/cross layers get blocking-composed masks only,
    since the sparse designs act on the encoder attention matrices.
    """

    def __init__(self, design: AttentionDesign, block_spec: BlockSpec,
                 sparsity: SparsityConfig, config: ModelConfig,
                 bank: PrefixBank, phase: str):
        if phase not in ("train", "eval"):
            raise ConfigError(f"phase must be train or eval, got {phase!r}")
        self.design = design
        self.block_spec = block_spec
        self.sparsity = sparsity
        self.config = config
        self.bank = bank
        self.phase = phase
        self.enc_band = block_spec.band(config.n_layers_enc)
        self.dec_band = block_spec.band(config.n_layers_dec)
        self._enc_cache: dict = {}
        self._dec_cache: dict = {}
        self._cross_cache: dict = {}

    def _enc_seg_map(self, t_src: int, spans: tuple[int, ...] | None) -> SegmentMap:
        segs = self.block_spec.enc_segments
        if spans and len(spans) == segs:
            return SegmentMap.from_spans(list(spans), segs)
        return SegmentMap.equal_split(t_src, segs)

    def _blocks_layer(self, layer_1b: int, band: int) -> bool:
        if self.design is AttentionDesign.UNIBLOCK:
            return True
        if self.design in (AttentionDesign.HIERBLOCK, AttentionDesign.HIERBLOCK_SOFTSA):
            return layer_1b <= band
        return False

    def encoder_transform(self, layer: int, t_src: int,
                          spans: tuple[int, ...] | None) -> AttentionTransform:
        key = (layer, t_src, spans)
        if key not in self._enc_cache:
            p = self.bank.length("enc", layer)
            layer_1b = layer + 1
            if p > 0 and self._blocks_layer(layer_1b, self.enc_band):
                seg_map = self._enc_seg_map(t_src, spans)
                alloc = allocate_prefixes(p, self.block_spec.enc_segments)
                mask = uniform_block_mask(seg_map, alloc, t_src, p).data
            else:
                mask = np.ones((t_src, p + t_src))
            self._enc_cache[key] = compose_design(
                self.design, layer_1b, self.config.n_layers_enc, mask,
                self.sparsity, self.enc_band, self.phase)
        return self._enc_cache[key]

    def _dec_restrict(self, mask: np.ndarray, layer_1b: int, p: int,
                      t_tgt: int) -> np.ndarray:
        if p == 0 or self.block_spec.dec_segments < 2 \
                or not self._blocks_layer(layer_1b, self.dec_band):
            return mask
        seg_map = SegmentMap.equal_split(t_tgt, self.block_spec.dec_segments)
        alloc = allocate_prefixes(p, self.block_spec.dec_segments)
        return restrict_prefix_columns(mask, seg_map, alloc, p)

    def decoder_self_mask(self, layer: int, t_tgt: int) -> np.ndarray:
        key = (layer, t_tgt)
        if key not in self._dec_cache:
            p = self.bank.length("dec_self", layer)
            mask = causal_mask(t_tgt, p)
            self._dec_cache[key] = self._dec_restrict(mask, layer + 1, p, t_tgt)
        return self._dec_cache[key]

    def cross_mask(self, layer: int, t_tgt: int, t_src: int) -> np.ndarray:
        key = (layer, t_tgt, t_src)
        if key not in self._cross_cache:
            p = self.bank.length("dec_cross", layer)
            mask = np.ones((t_tgt, p + t_src))
            self._cross_cache[key] = self._dec_restrict(mask, layer + 1, p, t_tgt)
        return self._cross_cache[key]


class PrefixSeq2Seq:
    """Encoder-decoder transformer whose attention sites carry prefix banks."""

    def __init__(self, config: ModelConfig, prefix_length: int = 0,
                 schedule: LayerSchedule | None = None, seed: int = 0):
        self.config = config
        self.schedule = schedule or LayerSchedule.all_layers()
        rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}
        self._posenc = sinusoidal_positions(config.max_seq_len, config.d_model)
        self._build_backbone(rng)
        self.bank = PrefixBank(config, prefix_length, self.schedule, rng)
        self.params.update(self.bank.tensors)
        self.mode = "finetune"

    # -- construction -------------------------------------------------------

    # Small-std init keeps pre-softmax attention scores near zero, so an
    # untrained model attends near-uniformly and Adam shapes it from there.
    WEIGHT_STD = 0.02
    EMBED_STD = 0.7

    def _mat(self, rng, fan_in: int, fan_out: int) -> np.ndarray:
        return rng.normal(0.0, self.WEIGHT_STD, size=(fan_in, fan_out))

    def _add_attn_params(self, rng, prefix: str) -> None:
        d = self.config.d_model
        for name in ("wq", "wk", "wv", "wo"):
            self.params[f"{prefix}/{name}"] = ad.parameter(self._mat(rng, d, d))
        for name in ("bq", "bk", "bv", "bo"):
            self.params[f"{prefix}/{name}"] = ad.parameter(np.zeros(d))

    def _add_ln_params(self, prefix: str) -> None:
        d = self.config.d_model
        self.params[f"{prefix}/g"] = ad.parameter(np.ones(d))
        self.params[f"{prefix}/b"] = ad.parameter(np.zeros(d))

    def _add_ff_params(self, rng, prefix: str) -> None:
        d, f = self.config.d_model, self.config.d_ff
        self.params[f"{prefix}/w1"] = ad.parameter(self._mat(rng, d, f))
        self.params[f"{prefix}/b1"] = ad.parameter(np.zeros(f))
        self.params[f"{prefix}/w2"] = ad.parameter(self._mat(rng, f, d))
        self.params[f"{prefix}/b2"] = ad.parameter(np.zeros(d))

    def _build_backbone(self, rng) -> None:
        cfg = self.config
        self.params["embed/tok"] = ad.parameter(
            rng.normal(0.0, self.EMBED_STD, size=(cfg.vocab_size, cfg.d_model)))
        for layer in range(cfg.n_layers_enc):
            base = f"enc/{layer}"
            self._add_ln_params(f"{base}/ln1")
            self._add_attn_params(rng, f"{base}/attn")
            self._add_ln_params(f"{base}/ln2")
            self._add_ff_params(rng, f"{base}/ff")
        self._add_ln_params("enc/final_ln")
        for layer in range(cfg.n_layers_dec):
            base = f"dec/{layer}"
            self._add_ln_params(f"{base}/ln1")
            self._add_attn_params(rng, f"{base}/self")
            self._add_ln_params(f"{base}/ln2")
            self._add_attn_params(rng, f"{base}/cross")
            self._add_ln_params(f"{base}/ln3")
            self._add_ff_params(rng, f"{base}/ff")
        self._add_ln_params("dec/final_ln")
        self.params["out/w"] = ad.parameter(self._mat(rng, cfg.d_model, cfg.vocab_size))
        self.params["out/b"] = ad.parameter(np.zeros(cfg.vocab_size))

    # -- parameter bookkeeping ----------------------------------------------

    def partition(self) -> ParamPartition:
        prefixes = frozenset(n for n in self.params if n.startswith("prefix/"))
        backbone = frozenset(self.params) - prefixes
        return ParamPartition(backbone=backbone, prefixes=prefixes)

    def set_mode(self, mode: str) -> None:
        if mode not in ("finetune", "prefixtune"):
            raise ConfigError(f"mode must be finetune or prefixtune, got {mode!r}")
        self.mode = mode
        part = self.partition()
        for name, tensor in self.params.items():
            tensor.grad_enabled = mode == "finetune" or name in part.prefixes

    def trainable_parameters(self) -> dict[str, ad.Tensor]:
        return {n: t for n, t in self.params.items() if t.grad_enabled}

    def backbone_bytes(self) -> bytes:
        part = self.partition()
        return b"".join(self.params[n].data.tobytes() for n in sorted(part.backbone))

    # -- forward pieces ------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")
        if ids.shape[-1] > self.config.max_seq_len:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds "
                             f"max_seq_len {self.config.max_seq_len}")
        return ids

    def _embed(self, ids: np.ndarray) -> ad.Tensor:
        x = ad.embedding(self.params["embed/tok"], ids)
        return ad.add_const(x, self._posenc[: ids.shape[-1]])

    def _mha(self, q_in: ad.Tensor, kv_in: ad.Tensor, pname: str,
             site: str, layer: int, mask: np.ndarray | None,
             transform: AttentionTransform | None,
             noise: np.ndarray | None,
             trunc_cache: dict | None,
             kv_capture: dict | None = None) -> tuple[ad.Tensor, ad.Tensor]:
        par = self.params
        heads = self.config.n_heads
        q_lin = ad.linear(q_in, par[f"{pname}/wq"], par[f"{pname}/bq"])
        k_lin = ad.linear(kv_in, par[f"{pname}/wk"], par[f"{pname}/bk"])
        v_lin = ad.linear(kv_in, par[f"{pname}/wv"], par[f"{pname}/bv"])
        if kv_capture is not None:
            kv_capture[(site, layer)] = (k_lin.data, v_lin.data)
        pk, pv = self.bank.slice(site, layer)
        inv_sqrt_d = 1.0 / math.sqrt(self.config.d_head)
        if transform is not None:
            attn = ad.prefix_attention_probs(
                q_lin, k_lin, pk, transform.mask, heads, inv_sqrt_d,
                noise=transform.softmax_noise(noise),
                inv_temperature=transform.softmax_inv_temperature)
            attn = transform.post_softmax(attn, noise, trunc_cache, (site, layer))
        else:
            attn = ad.prefix_attention_probs(q_lin, k_lin, pk, mask, heads,
                                             inv_sqrt_d)
        out = ad.prefix_attention_mix(attn, v_lin, pv, heads)
        return ad.linear(out, par[f"{pname}/wo"], par[f"{pname}/bo"]), attn

    def _ff(self, x: ad.Tensor, pname: str) -> ad.Tensor:
        par = self.params
        return ad.ff_gelu(x, par[f"{pname}/w1"], par[f"{pname}/b1"],
                          par[f"{pname}/w2"], par[f"{pname}/b2"])

    def _layer_noise(self, transform: AttentionTransform,
                     noise_stream: NoiseStream | None, layer: int, step: int,
                     shape: tuple[int, ...]) -> np.ndarray | None:
        kind = transform.noise_kind
        if kind is None:
            return None
        if noise_stream is None:
            raise ConfigError("training with soft sparse attention requires "
                              "a noise stream")
        b, h, t, keys = shape
        per_head = [getattr(noise_stream, kind)(layer, head, step, (b, t, keys))
                    for head in range(h)]
        return np.stack(per_head, axis=1)

    # -- public forward -------------------------------------------------------

    def encode(self, src: np.ndarray, planner: AttentionPlanner,
               spans: tuple[int, ...] | None = None,
               noise_stream: NoiseStream | None = None, step: int = 0,
               trunc_cache: dict | None = None,
               collect_attn: bool = False,
               kv_capture: dict | None = None) -> tuple[ad.Tensor, list[np.ndarray]]:
        src = self._check_ids(src)
        b, t = src.shape
        x = self._embed(src)
        attn_maps: list[np.ndarray] = []
        par = self.params
        for layer in range(self.config.n_layers_enc):
            base = f"enc/{layer}"
            transform = planner.encoder_transform(layer, t, spans)
            h = ad.layer_norm(x, par[f"{base}/ln1/g"], par[f"{base}/ln1/b"])
            p = self.bank.length("enc", layer)
            noise = self._layer_noise(
                transform, noise_stream, layer, step,
                (b, self.config.n_heads, t, p + t))
            attn_out, attn = self._mha(h, h, f"{base}/attn", "enc", layer,
                                       None, transform, noise, trunc_cache,
                                       kv_capture)
            x = ad.add(x, attn_out)
            h = ad.layer_norm(x, par[f"{base}/ln2/g"], par[f"{base}/ln2/b"])
            x = ad.add(x, self._ff(h, f"{base}/ff"))
            if collect_attn:
                attn_maps.append(attn.data.copy())
        x = ad.layer_norm(x, par["enc/final_ln/g"], par["enc/final_ln/b"])
        return x, attn_maps

    def decode(self, tgt_in: np.ndarray, enc_out: ad.Tensor,
               planner: AttentionPlanner,
               collect_attn: bool = False,
               kv_capture: dict | None = None) -> tuple[ad.Tensor, list[np.ndarray]]:
        tgt_in = self._check_ids(tgt_in)
        b, t = tgt_in.shape
        t_src = enc_out.shape[1]
        x = self._embed(tgt_in)
        attn_maps: list[np.ndarray] = []
        par = self.params
        for layer in range(self.config.n_layers_dec):
            base = f"dec/{layer}"
            h = ad.layer_norm(x, par[f"{base}/ln1/g"], par[f"{base}/ln1/b"])
            self_mask = planner.decoder_self_mask(layer, t)
            attn_out, self_attn = self._mha(h, h, f"{base}/self", "dec_self",
                                            layer, self_mask, None, None, None,
                                            kv_capture)
            x = ad.add(x, attn_out)
            h = ad.layer_norm(x, par[f"{base}/ln2/g"], par[f"{base}/ln2/b"])
            cross_mask = planner.cross_mask(layer, t, t_src)
            attn_out, cross_attn = self._mha(h, enc_out, f"{base}/cross",
                                             "dec_cross", layer, cross_mask,
                                             None, None, None, kv_capture)
            x = ad.add(x, attn_out)
            h = ad.layer_norm(x, par[f"{base}/ln3/g"], par[f"{base}/ln3/b"])
            x = ad.add(x, self._ff(h, f"{base}/ff"))
            if collect_attn:
                attn_maps.append(cross_attn.data.copy())
        x = ad.layer_norm(x, par["dec/final_ln/g"], par["dec/final_ln/b"])
        return ad.linear(x, par["out/w"], par["out/b"]), attn_maps

    def forward(self, src: np.ndarray, tgt_in: np.ndarray,
                planner: AttentionPlanner,
                spans: tuple[int, ...] | None = None,
                noise_stream: NoiseStream | None = None, step: int = 0,
                trunc_cache: dict | None = None,
                collect_attn: bool = False,
                kv_capture: dict | None = None):
        """Teacher-forced decoder logits [B, T_tgt, vocab] plus attention maps."""
        enc_out, enc_attn = self.encode(src, planner, spans, noise_stream,
                                        step, trunc_cache, collect_attn,
                                        kv_capture)
        logits, dec_attn = self.decode(tgt_in, enc_out, planner, collect_attn,
                                       kv_capture)
        return logits, {"encoder": enc_attn, "decoder_cross": dec_attn}

    def init_prefixes_from_activations(self, src: np.ndarray,
                                       tgt_in: np.ndarray,
                                       planner: AttentionPlanner,
                                       rng: np.random.Generator,
                                       spans: tuple[int, ...] | None = None) -> None:
        """Re-initialize prefix key/value pairs from real attention activations.

        Runs one forward pass over a probe batch, captures each site's key and
        value projections, and copies randomly sampled (key, value) row pairs
        into the prefix bank. Prefixes then start in-distribution, so a
        freshly prefixed pretrained backbone behaves close to the backbone
        alone.
        """
        captures: dict = {}
        self.forward(src, tgt_in, planner, spans=spans, kv_capture=captures)
        d = self.config.d_model
        for (site, layer), (kd, vd) in captures.items():
            pk, pv = self.bank.slice(site, layer)
            if pk is None:
                continue
            flat_k = kd.reshape(-1, d)
            flat_v = vd.reshape(-1, d)
            p = pk.shape[0]
            pick = rng.choice(flat_k.shape[0], size=p,
                              replace=flat_k.shape[0] < p)
            pk.data = flat_k[pick].copy()
            pv.data = flat_v[pick].copy()

    def batch_loss(self, src: np.ndarray, tgt_in: np.ndarray,
                   labels: np.ndarray, planner: AttentionPlanner,
                   spans: tuple[int, ...] | None = None,
                   noise_stream: NoiseStream | None = None, step: int = 0,
                   trunc_cache: dict | None = None) -> ad.Tensor:
        logits, _ = self.forward(src, tgt_in, planner, spans, noise_stream,
                                 step, trunc_cache)
        return ad.cross_entropy(logits, labels)
