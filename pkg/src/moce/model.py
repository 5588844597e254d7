"""The toy decoder-only transformer in dense and mixture form.

The dense base is attention-only in its residual stream: each block is
attention plus residual, while the block's feed-forward weights exist
solely to feed adapter bottlenecks after upcycling. Upcycling copies and
freezes the whole backbone and drops a fresh mixture layer (zero-init
adapters) into every block, so the upcycled model computes bit-for-bit
the dense base's function until training moves the adapters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, NumericError
from .layer import ExpertGroup, FeedForward, MoCELayer, RoutingRecord
from .seeding import substream
from .tensor import (
    ACTIVATIONS,
    Tensor,
    add,
    concat_cols,
    masked_cross_entropy,
    matmul,
    mul,
    rmsnorm,
    slice_cols,
    softmax,
    take_rows,
    transpose,
)

CKPT_MAGIC = "MOCE-CKPT"
CKPT_VERSION = "v1"
MANIFEST_NAME = "manifest.txt"
PARAMS_NAME = "params.bin"

_NEG_MASK = -1.0e30


@dataclass
class ModelConfig:
    """Dimensions and routing switches shared by the dense and mixture models."""

    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 64
    d_ff: int = 64
    n_groups: int = 2
    n_experts: int = 4
    adapter_rank: int = 64
    top_k: int = 2
    mode: str = "topk"
    renormalize: bool = False
    moe_scale: float = 1.0
    variant: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.d_model < 1 or self.n_layers < 1 or self.max_seq_len < 1:
            raise ConfigError("d_model, n_layers and max_seq_len must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_groups < 1 or self.n_experts < 1 or self.adapter_rank < 1 or self.d_ff < 1:
            raise ConfigError("n_groups, n_experts, adapter_rank and d_ff must be positive")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(f"top_k must satisfy 1 <= k <= {self.n_experts}, got {self.top_k}")
        if self.mode not in ("topk", "soft"):
            raise ConfigError(f"mode must be 'topk' or 'soft', got '{self.mode}'")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got '{self.activation}'")
        if not np.isfinite(self.moe_scale):
            raise ConfigError("moe_scale must be finite")


class _Block:
    """One transformer block: pre-norm causal attention with residual."""

    def __init__(self, norm: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                 base_ffn: FeedForward, n_heads: int):
        self.norm = norm
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo
        self.base_ffn = base_ffn
        self.n_heads = n_heads

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, requires_grad: bool) -> "_Block":
        d = cfg.d_model
        scale = d ** -0.5

        def mat():
            return Tensor(rng.normal(0.0, scale, size=(d, d)), requires_grad)

        norm = Tensor(np.ones(d), requires_grad)
        base = FeedForward.init(d, cfg.d_ff, rng, cfg.activation, requires_grad=requires_grad)
        return cls(norm, mat(), mat(), mat(), mat(), base, cfg.n_heads)

    def attend(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        z = rmsnorm(x, self.norm)
        q = matmul(z, self.wq)
        k = matmul(z, self.wk)
        v = matmul(z, self.wv)
        d_head = x.shape[1] // self.n_heads
        causal = Tensor(np.triu(np.full((t, t), _NEG_MASK), k=1))
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * d_head, (h + 1) * d_head
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            scores = add(mul(matmul(qh, transpose(kh)), d_head ** -0.5), causal)
            heads.append(matmul(softmax(scores, axis=-1), vh))
        return add(x, matmul(concat_cols(heads), self.wo))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.attn_norm", self.norm),
            (f"{prefix}.wq", self.wq),
            (f"{prefix}.wk", self.wk),
            (f"{prefix}.wv", self.wv),
            (f"{prefix}.wo", self.wo),
            (f"{prefix}.base_ffn.w1", self.base_ffn.w1),
            (f"{prefix}.base_ffn.w2", self.base_ffn.w2),
        ]


class _Backbone:
    """Embeddings, blocks and head shared by both model classes."""

    def __init__(self, cfg: ModelConfig, tok_emb: Tensor, pos_emb: Tensor,
                 blocks: list[_Block], final_norm: Tensor, head: Tensor):
        self.cfg = cfg
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, requires_grad: bool) -> "_Backbone":
        d = cfg.d_model
        tok = Tensor(rng.normal(0.0, 0.5, size=(cfg.vocab_size, d)), requires_grad)
        pos = Tensor(rng.normal(0.0, 0.5, size=(cfg.max_seq_len, d)), requires_grad)
        blocks = [_Block.init(cfg, rng, requires_grad) for _ in range(cfg.n_layers)]
        final = Tensor(np.ones(d), requires_grad)
        head = Tensor(rng.normal(0.0, d ** -0.5, size=(d, cfg.vocab_size)), requires_grad)
        return cls(cfg, tok, pos, blocks, final, head)

    def embed(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError("token_ids must be a non-empty 1-D sequence")
        if ids.size > self.cfg.max_seq_len:
            raise ContractError(
                f"sequence length {ids.size} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ContractError(f"token id out of range for vocab size {self.cfg.vocab_size}")
        return add(take_rows(self.tok_emb, ids), take_rows(self.pos_emb, np.arange(ids.size)))

    def project(self, x: Tensor) -> Tensor:
        return matmul(rmsnorm(x, self.final_norm), self.head)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, b in enumerate(self.blocks):
            out.extend(b.named_parameters(f"layer{i}"))
        out.extend([("final_norm", self.final_norm), ("head", self.head)])
        return out


class DenseBaseModel:
    """The upcycling source: causal attention blocks, no stream-side FFN.

    Each block still carries feed-forward weights; they ride along frozen
    into the mixture model, where adapters read their features. Keeping
    them out of the residual stream here is what lets zero-initialised
    adapters reproduce this model exactly.
    """

    def __init__(self, backbone: _Backbone):
        self.backbone = backbone
        self.cfg = backbone.cfg

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "DenseBaseModel":
        rng = substream(seed, "init", "dense")
        return cls(_Backbone.init(cfg, rng, requires_grad=True))

    def forward(self, token_ids) -> Tensor:
        x = self.backbone.embed(token_ids)
        for block in self.backbone.blocks:
            x = block.attend(x)
        return self.backbone.project(x)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone.named_parameters()

    def trainable_parameters(self) -> list[Tensor]:
        # The feed-forward stacks have no path to the loss here; they are
        # excluded so the optimiser state covers only live parameters.
        skip = {id(b.base_ffn.w1) for b in self.backbone.blocks}
        skip |= {id(b.base_ffn.w2) for b in self.backbone.blocks}
        return [p for _, p in self.named_parameters() if id(p) not in skip]


class MoCEModel:
    """The upcycled model: the frozen backbone plus one mixture layer per block."""

    def __init__(self, backbone: _Backbone, layers: list[MoCELayer]):
        if len(layers) != len(backbone.blocks):
            raise ConfigError(
                f"{len(backbone.blocks)} blocks but {len(layers)} mixture layers"
            )
        self.backbone = backbone
        self.cfg = backbone.cfg
        self.layers = layers
        for i, layer in enumerate(layers):
            layer.layer_key = i

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "MoCEModel":
        """A fresh model with a random frozen backbone; used by loading."""
        backbone = _Backbone.init(cfg, substream(seed, "init", "dense"), requires_grad=False)
        return cls(backbone, _make_moce_layers(backbone, cfg, seed))

    def forward(self, token_ids, group_id: int, record: RoutingRecord | None = None) -> Tensor:
        """Logits for one sequence routed through expert group ``group_id``."""
        if not (0 <= group_id < self.cfg.n_groups):
            raise ContractError(f"group id {group_id} out of range for {self.cfg.n_groups} groups")
        x = self.backbone.embed(token_ids)
        n_tokens = x.shape[0]
        for block, layer in zip(self.backbone.blocks, self.layers):
            x = block.attend(x)
            if self.cfg.variant:
                x = layer.variant_forward(x, group_id, record)
            else:
                x = layer.forward(x, group_id, record)
        if record is not None:
            record.advance(n_tokens)
            record.active_experts_per_token = (2 if self.cfg.variant else 1) * (
                self.cfg.n_experts if self.cfg.mode == "soft" else self.cfg.top_k
            )
        return self.backbone.project(x)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.backbone.named_parameters()
        for i, layer in enumerate(self.layers):
            for g, group in enumerate(layer.groups):
                out.extend(_group_parameters(f"layer{i}.group{g}", group))
            if layer.general_group is not None:
                out.extend(_group_parameters(f"layer{i}.general", layer.general_group))
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def reset_instrumentation(self) -> None:
        for layer in self.layers:
            layer.reset_instrumentation()


def _group_parameters(prefix: str, group: ExpertGroup) -> list[tuple[str, Tensor]]:
    out = [(f"{prefix}.router", group.router)]
    for e, expert in enumerate(group.experts):
        out.append((f"{prefix}.expert{e}.w_down", expert.w_down))
        out.append((f"{prefix}.expert{e}.w_up", expert.w_up))
    return out


def _make_moce_layers(backbone: _Backbone, cfg: ModelConfig, seed: int) -> list[MoCELayer]:
    layers = []
    for i, block in enumerate(backbone.blocks):
        rng = substream(seed, "init", "moce", i)
        groups = [
            ExpertGroup.init(cfg.d_model, cfg.n_experts, cfg.adapter_rank, rng, cfg.activation)
            for _ in range(cfg.n_groups)
        ]
        general = None
        if cfg.variant:
            general = ExpertGroup.init(cfg.d_model, cfg.n_experts, cfg.adapter_rank, rng, cfg.activation)
        layers.append(MoCELayer(
            groups=groups,
            base_ffn=block.base_ffn,
            k=cfg.top_k,
            mode=cfg.mode,
            renormalize=cfg.renormalize,
            moe_scale=cfg.moe_scale,
            general_group=general,
        ))
    return layers


def upcycle_init(dense_base: DenseBaseModel, cfg: ModelConfig, seed: int) -> MoCEModel:
    """Create the mixture model on top of a trained (or fresh) dense base.

    The backbone (embeddings, attention, feed-forward stacks, head) is
    copied and frozen; adapters start with W_up = 0 and routers small
    random, so the new model's function equals the dense base's exactly.
    """
    if dense_base.cfg != cfg_backbone_view(cfg, dense_base.cfg):
        raise ConfigError(
            "dense base and target config disagree on backbone dimensions: "
            f"{dense_base.cfg} vs {cfg}"
        )
    src = dense_base.backbone
    frozen = _Backbone(
        cfg,
        _frozen_copy(src.tok_emb),
        _frozen_copy(src.pos_emb),
        [
            _Block(
                _frozen_copy(b.norm),
                _frozen_copy(b.wq),
                _frozen_copy(b.wk),
                _frozen_copy(b.wv),
                _frozen_copy(b.wo),
                FeedForward(_frozen_copy(b.base_ffn.w1), _frozen_copy(b.base_ffn.w2), cfg.activation),
                cfg.n_heads,
            )
            for b in src.blocks
        ],
        _frozen_copy(src.final_norm),
        _frozen_copy(src.head),
    )
    return MoCEModel(frozen, _make_moce_layers(frozen, cfg, seed))


def cfg_backbone_view(cfg: ModelConfig, like: ModelConfig) -> ModelConfig:
    """The dense base's view of a mixture config: same backbone fields."""
    return ModelConfig(
        vocab_size=cfg.vocab_size,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        max_seq_len=cfg.max_seq_len,
        d_ff=cfg.d_ff,
        n_groups=like.n_groups,
        n_experts=like.n_experts,
        adapter_rank=like.adapter_rank,
        top_k=like.top_k,
        mode=like.mode,
        renormalize=like.renormalize,
        moe_scale=like.moe_scale,
        variant=like.variant,
        activation=cfg.activation,
    )


def _frozen_copy(p: Tensor) -> Tensor:
    return Tensor(p.data.copy(), requires_grad=False)


def model_forward(model: MoCEModel, token_ids, group_id: int,
                  record: RoutingRecord | None = None) -> Tensor:
    """Functional alias for ``MoCEModel.forward``."""
    return model.forward(token_ids, group_id, record)


def lm_loss(logits: Tensor, targets, supervised_mask) -> Tensor:
    """Mean next-token NLL over the supervised span."""
    return masked_cross_entropy(logits, targets, supervised_mask)


def greedy_decode(model: MoCEModel, prompt_ids, group_id: int, max_new_tokens: int,
                  eos_id: int) -> list[int]:
    """Deterministic argmax decoding with the expert group fixed per prompt."""
    ids = list(int(i) for i in prompt_ids)
    if not ids:
        raise ContractError("cannot decode from an empty prompt")
    for _ in range(max_new_tokens):
        if len(ids) >= model.cfg.max_seq_len:
            break
        logits = model.forward(ids, group_id)
        next_id = int(np.argmax(logits.data[-1]))
        ids.append(next_id)
        if next_id == eos_id:
            break
    return ids


# -- checkpointing ------------------------------------------------------

_BOOL_FIELDS = {"renormalize", "variant"}
_FLOAT_FIELDS = {"moe_scale"}
_STR_FIELDS = {"mode", "activation"}


def save_checkpoint(directory: str, model: MoCEModel, seed: int, step: int,
                    kmeans_path: str = "") -> None:
    """Write a versioned manifest plus one little-endian float64 blob per parameter."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    for f in fields(ModelConfig):
        lines.append(f"config.{f.name}={getattr(model.cfg, f.name)}")
    lines.append(f"seed={seed}")
    lines.append(f"step={step}")
    lines.append(f"kmeans_path={kmeans_path}")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")

    params = model.named_parameters()
    with open(out / PARAMS_NAME, "wb") as fh:
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            shape = tensor.data.shape
            fh.write(struct.pack("<I", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(tensor.data.astype("<f8", copy=False).tobytes(order="C"))


def _parse_manifest(path: Path) -> dict[str, str]:
    if not path.exists():
        raise FormatError(f"missing checkpoint manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != [CKPT_MAGIC, CKPT_VERSION]:
        raise FormatError(f"line 1: expected '{CKPT_MAGIC} {CKPT_VERSION}' header")
    entries = {}
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"line {i}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _config_from_manifest(entries: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"config.{f.name}"
        if key not in entries:
            raise FormatError(f"manifest is missing '{key}'")
        raw = entries[key]
        if f.name in _BOOL_FIELDS:
            kwargs[f.name] = raw == "True"
        elif f.name in _FLOAT_FIELDS:
            kwargs[f.name] = float(raw)
        elif f.name in _STR_FIELDS:
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def load_checkpoint(directory: str) -> tuple[MoCEModel, dict[str, str]]:
    """Rebuild a model from ``save_checkpoint`` output, bit-exact."""
    root = Path(directory)
    entries = _parse_manifest(root / MANIFEST_NAME)
    cfg = _config_from_manifest(entries)
    seed = int(entries.get("seed", "0"))
    model = MoCEModel.build(cfg, seed)

    blob_path = root / PARAMS_NAME
    if not blob_path.exists():
        raise FormatError(f"missing parameter blob at {blob_path}")
    raw = blob_path.read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise FormatError("parameter blob truncated")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(size * 8), dtype="<f8").reshape(shape)
        loaded[name] = np.array(data, dtype=np.float64)
    if offset != len(raw):
        raise FormatError("trailing bytes after the last parameter blob")

    for name, tensor in model.named_parameters():
        if name not in loaded:
            raise FormatError(f"checkpoint is missing parameter '{name}'")
        if loaded[name].shape != tensor.data.shape:
            raise ConfigError(
                f"parameter '{name}' has shape {loaded[name].shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data = loaded[name]
    extra = set(loaded) - {name for name, _ in model.named_parameters()}
    if extra:
        raise FormatError(f"checkpoint holds unknown parameters: {sorted(extra)}")
    if not all(np.all(np.isfinite(v)) for v in loaded.values()):
        raise NumericError("checkpoint contains non-finite parameter values")
    return model, entries
