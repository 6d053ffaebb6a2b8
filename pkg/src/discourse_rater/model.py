"""Full model assembly: text-centered fusion stack, unimodal and LSTM variants.

The fusion architecture prepends a learnable CLS embedding to each modality
sequence, then stacks M fusion modules.  One module runs cross-attention with
the text stream as query against the audio sequence, then against the video
sequence, then self-attention over the text stream.  Audio and video act as
fixed key/value context for every module; only the text stream is updated.
After M modules the CLS row is the pooled representation fed to the
per-component rating heads.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import blocks, tensor as T
from .blocks import (AttentionParams, BiLstmParams, EncoderBlockParams,
                     HeadParams, add_positional, bilstm_encode, encoder_block,
                     mlp_head, prepend_cls, xavier_uniform, zeros_param)
from .data import AUDIO_DIM, TEXT_DIM, VIDEO_DIM, SegmentFeatures
from .errors import ConfigError, DataError, FormatError, NumericsError
from .objective import COMPONENTS
from .tensor import Tensor

MODALITIES = ("text", "audio", "video")
MODALITY_DIMS = {"text": TEXT_DIM, "audio": AUDIO_DIM, "video": VIDEO_DIM}
MODEL_DIM = 768
NUM_HEADS = 12
FUSION_MODULE_GRID = (1, 2, 3, 4, 5)

CHECKPOINT_MAGIC = b"DFM1"


def parse_modalities(spec: str | Sequence[str]) -> tuple[str, ...]:
    """Accept "T+A", ("text", "audio"), etc.; return canonical ordered names."""
    short = {"t": "text", "a": "audio", "v": "video"}
    if isinstance(spec, str):
        parts = [p.strip() for p in spec.replace(",", "+").split("+") if p.strip()]
    else:
        parts = list(spec)
    names = set()
    for part in parts:
        key = part.lower()
        name = short.get(key, key)
        if name not in MODALITIES:
            raise ConfigError(f"unknown modality {part!r}")
        names.add(name)
    return tuple(m for m in MODALITIES if m in names)


def modality_label(modalities: Sequence[str]) -> str:
    return "+".join(m[0].upper() for m in MODALITIES if m in modalities)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; the hyperparameter grid constrains M to 1..5."""

    modalities: tuple[str, ...] = ("text",)
    encoder: str = "attention"
    fusion_modules: int = 1
    task: str = "multi"
    component: str | None = None
    loss: str = "oll"
    positional: bool = True
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", parse_modalities(self.modalities))
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        if self.encoder not in ("attention", "lstm"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "attention":
            if len(self.modalities) > 1 and "text" not in self.modalities:
                raise ConfigError("multimodal attention configs require the text stream")
            if self.fusion_modules not in FUSION_MODULE_GRID:
                raise ConfigError(
                    f"fusion_modules must be one of {FUSION_MODULE_GRID}, got {self.fusion_modules}")
        else:
            if self.modalities != ("text", "audio"):
                raise ConfigError("the LSTM baseline is defined for the T+A configuration")
        if self.task not in ("multi", "single"):
            raise ConfigError(f"unknown task mode {self.task!r}")
        if self.task == "single":
            if self.component not in COMPONENTS:
                raise ConfigError(f"single-task mode needs component from {COMPONENTS}")
        elif self.component is not None:
            raise ConfigError("component is only meaningful in single-task mode")
        if self.loss not in ("oll", "ce", "l1"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_mode(self) -> str:
        return "regress" if self.loss == "l1" else "classify"

    @property
    def head_components(self) -> tuple[str, ...]:
        return COMPONENTS if self.task == "multi" else (self.component,)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["modalities"] = list(self.modalities)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelConfig":
        kwargs = dict(doc)
        kwargs["modalities"] = tuple(kwargs.get("modalities", ("text",)))
        return cls(**kwargs)


@dataclass
class FusionModule:
    cross_audio: EncoderBlockParams | None
    cross_video: EncoderBlockParams | None
    self_attn: EncoderBlockParams


@dataclass
class FusionModel:
    """All learnable state for one configuration."""

    config: ModelConfig
    cls: dict[str, Tensor] = field(default_factory=dict)
    modules: list[FusionModule] = field(default_factory=list)
    heads: dict[str, HeadParams] = field(default_factory=dict)
    lstms: dict[str, BiLstmParams] = field(default_factory=dict)
    audio_in_w: Tensor | None = None
    audio_in_b: Tensor | None = None

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for modality, tensor in self.cls.items():
            out[f"cls.{modality}"] = tensor
        if self.audio_in_w is not None:
            out["audio_in.w"] = self.audio_in_w
            out["audio_in.b"] = self.audio_in_b
        for i, module in enumerate(self.modules):
            for label, block in (("cross_audio", module.cross_audio),
                                 ("cross_video", module.cross_video),
                                 ("self", module.self_attn)):
                if block is None:
                    continue
                for name, tensor in block.parameters().items():
                    out[f"module{i}.{label}.{name}"] = tensor
        for modality, lstm in self.lstms.items():
            for name, tensor in lstm.parameters().items():
                out[f"lstm.{modality}.{name}"] = tensor
        for component, head in self.heads.items():
            for name, tensor in head.parameters().items():
                out[f"head.{component}.{name}"] = tensor
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())


def _cls_param(rng: np.random.Generator, dim: int) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=dim), requires_grad=True)


def build_model(config: ModelConfig, seed: int | None = None) -> FusionModel:
    """Deterministically initialize all parameters for ``config``."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    model = FusionModel(config=config)
    mods = config.modalities

    if config.encoder == "lstm":
        model.lstms["text"] = BiLstmParams.create(rng, TEXT_DIM)
        model.lstms["audio"] = BiLstmParams.create(rng, AUDIO_DIM)
        head_in = 2 * TEXT_DIM + 2 * AUDIO_DIM
    else:
        fused = len(mods) > 1
        if fused:
            for modality in mods:
                model.cls[modality] = _cls_param(rng, MODALITY_DIMS[modality])
        else:
            only = mods[0]
            if only == "audio":
                model.audio_in_w = xavier_uniform(rng, AUDIO_DIM, MODEL_DIM)
                model.audio_in_b = zeros_param(MODEL_DIM)
            model.cls[only] = _cls_param(rng, MODEL_DIM)
        for _ in range(config.fusion_modules):
            cross_audio = cross_video = None
            if fused and "audio" in mods:
                cross_audio = EncoderBlockParams.create(
                    rng, MODEL_DIM, context_dim=AUDIO_DIM,
                    num_heads=NUM_HEADS, dropout_rate=config.dropout)
            if fused and "video" in mods:
                cross_video = EncoderBlockParams.create(
                    rng, MODEL_DIM, context_dim=VIDEO_DIM,
                    num_heads=NUM_HEADS, dropout_rate=config.dropout)
            self_attn = EncoderBlockParams.create(
                rng, MODEL_DIM, num_heads=NUM_HEADS, dropout_rate=config.dropout)
            model.modules.append(FusionModule(cross_audio, cross_video, self_attn))
        head_in = MODEL_DIM

    out_dim = 1 if config.head_mode == "regress" else 7
    for component in config.head_components:
        model.heads[component] = HeadParams.create(rng, in_dim=head_in, out_dim=out_dim)
    return model


def _required_modalities(config: ModelConfig) -> tuple[str, ...]:
    if config.encoder == "lstm":
        return ("text", "audio")
    return config.modalities


def _check_inputs(config: ModelConfig, seg: SegmentFeatures) -> None:
    for modality in _required_modalities(config):
        arr = seg.modality(modality)
        if arr.shape[0] < 1:
            raise DataError(
                f"segment {seg.segment_id!r}: empty {modality} sequence "
                f"required by this configuration")


def _mask_with_cls(mask: np.ndarray | None, length: int) -> np.ndarray:
    if mask is None:
        return np.ones(length + 1, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return np.concatenate([[True], mask])


def _prepared_stream(model: FusionModel, seg: SegmentFeatures, modality: str,
                     masks: Mapping[str, np.ndarray] | None) -> tuple[Tensor, np.ndarray]:
    """Positional encodings, then CLS; returns the stream and its validity mask."""
    config = model.config
    raw = Tensor(seg.modality(modality))
    if modality == "audio" and model.audio_in_w is not None:
        raw = T.matmul(raw, model.audio_in_w) + model.audio_in_b
    stream = add_positional(raw, enabled=config.positional)
    stream = prepend_cls(stream, model.cls[modality])
    mask = None if masks is None else masks.get(modality)
    return stream, _mask_with_cls(mask, raw.shape[0])


def forward(model: FusionModel, seg: SegmentFeatures, training: bool = False,
            rng: np.random.Generator | None = None,
            masks: Mapping[str, np.ndarray] | None = None) -> dict[str, Tensor]:
    """Map one segment to per-component outputs.

    Classification heads return 7-way probability vectors; the regression
    variant returns one unbounded score per component.  ``masks`` marks valid
    rows of each (possibly padded) modality sequence.
    """
    _check_inputs(model.config, seg)
    if model.config.encoder == "lstm":
        pooled = _lstm_pooled(model, seg, masks)
    else:
        pooled = _attention_pooled(model, seg, training, rng, masks)
    outputs = {
        component: mlp_head(pooled, head, mode=model.config.head_mode)
        for component, head in model.heads.items()
    }
    for component, out in outputs.items():
        if not np.isfinite(out.data).all():
            raise NumericsError(
                f"segment {seg.segment_id!r}: non-finite {component} output")
    return outputs


def _attention_pooled(model: FusionModel, seg: SegmentFeatures, training: bool,
                      rng: np.random.Generator | None,
                      masks: Mapping[str, np.ndarray] | None) -> Tensor:
    config = model.config
    if len(config.modalities) == 1:
        stream, mask = _prepared_stream(model, seg, config.modalities[0], masks)
        for module in model.modules:
            stream = encoder_block(stream, module.self_attn, x_mask=mask,
                                   training=training, rng=rng)
        return stream[0]

    text, text_mask = _prepared_stream(model, seg, "text", masks)
    context: dict[str, tuple[Tensor, np.ndarray]] = {}
    for modality in ("audio", "video"):
        if modality in config.modalities:
            context[modality] = _prepared_stream(model, seg, modality, masks)

    for module in model.modules:
        if module.cross_audio is not None:
            ctx, ctx_mask = context["audio"]
            text = encoder_block(text, module.cross_audio, context=ctx,
                                 x_mask=text_mask, context_mask=ctx_mask,
                                 training=training, rng=rng)
        if module.cross_video is not None:
            ctx, ctx_mask = context["video"]
            text = encoder_block(text, module.cross_video, context=ctx,
                                 x_mask=text_mask, context_mask=ctx_mask,
                                 training=training, rng=rng)
        text = encoder_block(text, module.self_attn, x_mask=text_mask,
                             training=training, rng=rng)
    return text[0]


def _lstm_pooled(model: FusionModel, seg: SegmentFeatures,
                 masks: Mapping[str, np.ndarray] | None) -> Tensor:
    parts = []
    for modality in ("text", "audio"):
        arr = seg.modality(modality)
        if masks is not None and masks.get(modality) is not None:
            arr = arr[np.asarray(masks[modality], dtype=bool)]
        parts.append(bilstm_encode(Tensor(arr), model.lstms[modality]))
    return T.concat(parts, axis=0)


# -- checkpointing ---------------------------------------------------------------


def save_model(model: FusionModel, path: str | Path) -> None:
    """Write the "DFM1" container: config JSON, then named float32 tensors."""
    params = model.parameters()
    config_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(config_bytes)), config_bytes,
              struct.pack("<I", len(params))]
    for name, tensor in params.items():
        name_bytes = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path: str | Path) -> FusionModel:
    """Rebuild a model from a "DFM1" checkpoint, reproducing forward bitwise."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}", offset=0)
    offset = 4

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if len(raw) < offset + size:
            raise FormatError(f"{path}: truncated checkpoint", offset=offset)
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    (config_len,) = read("<I")
    config_doc = json.loads(raw[offset:offset + config_len].decode("utf-8"))
    offset += config_len
    model = build_model(ModelConfig.from_dict(config_doc))
    params = model.parameters()

    (n_params,) = read("<I")
    if n_params != len(params):
        raise FormatError(
            f"{path}: checkpoint has {n_params} tensors, model needs {len(params)}",
            offset=offset)
    for _ in range(n_params):
        (name_len,) = read("<I")
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        if name not in params:
            raise FormatError(f"{path}: unexpected tensor {name!r}", offset=offset)
        expected = params[name].data.shape
        if tuple(shape) != expected:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {tuple(shape)}, expected {expected}",
                offset=offset)
        nbytes = count * 4
        if len(raw) < offset + nbytes:
            raise FormatError(f"{path}: truncated tensor {name!r}", offset=len(raw))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name].data = arr.astype(T.current_dtype())
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes", offset=offset)
    return model
