"""Audio-visual separator: lip-motion, facial and vocal attribute encoders plus the mask U-Net.

Sub-networks are registered under the names lip, face, audio_enc,
audio_dec and vocal, so a state_dict is keyed by sub-network.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from core.config import RunConfig, settings_digest
from core.errors import ConfigError, InvalidInput, ShapeError
from services.dsp import (
    EMBEDDING_FREQ_BINS,
    ComplexMask,
    ComplexSpectrogram,
    StftConfig,
    complex_multiply,
)
from services.visuals import FaceTrackInput, stack_faces, stack_rois

logger = logging.getLogger(__name__)

MODES = ('general_single_speaker', 'dedicated_two_speaker')
VISUAL_FEATURES = ('both', 'static_face', 'lip_motion', 'none')
NORMALIZATIONS = ('batch', 'none')


# ==================== Configuration ====================

@dataclass(frozen=True)
class ModelConfig:
    """Shapes, widths and mode of the separator."""
    n_frames: int = 64
    roi_size: int = 88
    face_size: int = 224
    lip_channels: int = 512
    face_dim: int = 128
    audio_channels: int = 512
    mask_bound: float = 5.0
    mode: str = 'general_single_speaker'
    channel_scale: float = 1.0
    visual_feature: str = 'both'
    normalization: str = 'batch'
    stft: StftConfig = StftConfig()

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got '{self.mode}'")
        if self.visual_feature not in VISUAL_FEATURES:
            raise ConfigError(f"model.visual_feature must be one of {VISUAL_FEATURES}, got '{self.visual_feature}'")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"model.normalization must be one of {NORMALIZATIONS}, got '{self.normalization}'")
        if self.channel_scale <= 0:
            raise ConfigError("model.channel_scale must be positive")
        if self.n_frames < 1 or self.mask_bound <= 0:
            raise ConfigError("model.n_frames and model.mask_bound must be positive")
        if self.audio_only and self.dedicated:
            raise ConfigError("an audio-only separator predicts two unordered masks; use general_single_speaker mode")
        if self.stft.freq_bins != 2 * EMBEDDING_FREQ_BINS + 1:
            raise ConfigError(f"separator expects {2 * EMBEDDING_FREQ_BINS + 1} frequency bins")

    @classmethod
    def from_config(cls, run: RunConfig) -> 'ModelConfig':
        section = run.section('model')
        return cls(stft=StftConfig.from_settings(run.section('stft')), **section)

    def width(self, base: int) -> int:
        return max(4, int(round(base * self.channel_scale)))

    @property
    def lip_dim(self) -> int:
        """V_l"""
        return self.width(self.lip_channels)

    @property
    def bottleneck_dim(self) -> int:
        """D"""
        return self.width(self.audio_channels)

    @property
    def embed_dim(self) -> int:
        return self.face_dim

    @property
    def uses_lips(self) -> bool:
        return self.visual_feature in ('both', 'lip_motion')

    @property
    def uses_face(self) -> bool:
        return self.visual_feature in ('both', 'static_face')

    @property
    def audio_only(self) -> bool:
        return self.visual_feature == 'none'

    @property
    def visual_dim(self) -> int:
        """V = V_l + V_f, or one of them for the single-stream variants."""
        return (self.lip_dim if self.uses_lips else 0) + (self.face_dim if self.uses_face else 0)

    @property
    def dedicated(self) -> bool:
        return self.mode == 'dedicated_two_speaker'

    @property
    def n_masks(self) -> int:
        """Masks per forward pass: one per visible speaker, or two unordered without visuals."""
        return 2 if self.dedicated or self.audio_only else 1

    @property
    def fusion_dim(self) -> int:
        return (2 if self.dedicated else 1) * self.visual_dim + self.bottleneck_dim

    @property
    def spec_frames(self) -> int:
        return 4 * self.n_frames

    @property
    def encoder_widths(self) -> List[int]:
        return [self.width(128), self.width(256), self.width(256),
                self.width(512), self.width(512), self.bottleneck_dim]

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data['stft'] = asdict(self.stft)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'ModelConfig':
        values = dict(data)
        values['stft'] = StftConfig(**values['stft'])
        return cls(**values)

    @property
    def digest(self) -> str:
        return settings_digest(self.to_dict())


@dataclass(frozen=True)
class Embedding:
    """Unit-norm face or voice vector."""
    values: np.ndarray
    modality: str

    def __post_init__(self) -> None:
        if self.modality not in ('face', 'voice'):
            raise InvalidInput(f"modality must be 'face' or 'voice', got '{self.modality}'")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInput("embedding contains non-finite values")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


# ==================== Building Blocks ====================

def _norm2d(cfg: ModelConfig, channels: int) -> nn.Module:
    return nn.BatchNorm2d(channels) if cfg.normalization == 'batch' else nn.Identity()


def _norm1d(cfg: ModelConfig, channels: int) -> nn.Module:
    return nn.BatchNorm1d(channels) if cfg.normalization == 'batch' else nn.Identity()


def _norm3d(cfg: ModelConfig, channels: int) -> nn.Module:
    return nn.BatchNorm3d(channels) if cfg.normalization == 'batch' else nn.Identity()


def _conv_bn_relu(cfg: ModelConfig, c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        _norm2d(cfg, c_out),
        nn.ReLU(inplace=True),
    )


class TemporalBlock(nn.Module):
    """Two dilated 1D convolutions with a residual path; keeps the time length."""

    def __init__(self, cfg: ModelConfig, c_in: int, c_out: int, dilation: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(c_in, c_out, 3, padding=dilation, dilation=dilation, bias=False),
            _norm1d(cfg, c_out),
            nn.ReLU(inplace=True),
            nn.Conv1d(c_out, c_out, 3, padding=dilation, dilation=dilation, bias=False),
            _norm1d(cfg, c_out),
        )
        self.skip = nn.Identity() if c_in == c_out else nn.Conv1d(c_in, c_out, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.body(x) + self.skip(x))


class BasicBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _norm2d(cfg, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = _norm2d(cfg, c_out)
        self.downsample: Optional[nn.Module] = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                _norm2d(cfg, c_out),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


# ==================== Encoders ====================

class LipMotionEncoder(nn.Module):
    """3D conv front end, per-frame 2D encoder, temporal conv stack: B x N x H x W -> B x V_l x N."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.width(64), cfg.width(128), cfg.width(256)
        self.front = nn.Sequential(
            nn.Conv3d(1, c0, (5, 7, 7), stride=(1, 2, 2), padding=(2, 3, 3), bias=False),
            _norm3d(cfg, c0),
            nn.ReLU(inplace=True),
            nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),
        )
        self.trunk = nn.Sequential(
            _conv_bn_relu(cfg, c0, c1, stride=2),
            _conv_bn_relu(cfg, c1, c1),
            _conv_bn_relu(cfg, c1, c2, stride=2),
            _conv_bn_relu(cfg, c2, c2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.tcn = nn.Sequential(
            TemporalBlock(cfg, c2, cfg.lip_dim, dilation=1),
            TemporalBlock(cfg, cfg.lip_dim, cfg.lip_dim, dilation=2),
            TemporalBlock(cfg, cfg.lip_dim, cfg.lip_dim, dilation=4),
        )

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.n_frames, self.cfg.roi_size, self.cfg.roi_size)
        if rois.dim() != 4 or tuple(rois.shape[1:]) != expected:
            raise ShapeError(f"mouth ROIs must be B x {expected}, got {tuple(rois.shape)}")
        b, n = rois.shape[:2]
        x = self.front(rois.unsqueeze(1))                     # B x c0 x N x h x w
        c, h, w = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(1, 2).reshape(b * n, c, h, w)
        x = self.trunk(x).reshape(b, n, -1).transpose(1, 2)   # B x c2 x N
        return self.tcn(x)


class ResNetEmbedder(nn.Module):
    """ResNet-18 layout with scaled widths, projected to a unit-norm embedding."""

    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        widths = [cfg.width(64), cfg.width(128), cfg.width(256), cfg.width(512)]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 7, stride=2, padding=3, bias=False),
            _norm2d(cfg, widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        c_in = widths[0]
        for i, width in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(BasicBlock(cfg, c_in, width, stride), BasicBlock(cfg, width, width)))
            c_in = width
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[-1], cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.stages(self.stem(x))).flatten(1)
        return F.normalize(self.fc(x), dim=1)


class FaceEncoder(ResNetEmbedder):
    """B x 3 x S x S face crops -> B x V_f facial attribute embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, in_channels=3)
        self.size = cfg.face_size

    def forward(self, faces: torch.Tensor) -> torch.Tensor:
        if faces.dim() != 4 or tuple(faces.shape[1:]) != (3, self.size, self.size):
            raise ShapeError(f"face images must be B x 3 x {self.size} x {self.size}, got {tuple(faces.shape)}")
        return super().forward(faces)


class VocalEncoder(ResNetEmbedder):
    """B x 2 x 256 x T separated spectrograms -> B x V_f vocal attribute embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, in_channels=2)

    def forward(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.dim() != 4 or spec.shape[1] != 2:
            raise ShapeError(f"spectrogram must be B x 2 x F x T, got {tuple(spec.shape)}")
        if spec.shape[2] != EMBEDDING_FREQ_BINS:
            raise ShapeError(
                f"vocal encoder takes {EMBEDDING_FREQ_BINS} frequency bins, got {spec.shape[2]}; "
                f"crop with crop_for_embedding first"
            )
        return super().forward(spec)


class AudioEncoder(nn.Module):
    """2 x 257 x 4N spectrogram -> D x 1 x N bottleneck plus skip features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2 = cfg.width(64), cfg.width(128)
        self.down1 = nn.Sequential(
            nn.Conv2d(2, w1, 4, stride=2, padding=1, bias=False), _norm2d(cfg, w1), nn.LeakyReLU(0.2))
        self.down2 = nn.Sequential(
            nn.Conv2d(w1, w2, 4, stride=2, padding=1, bias=False), _norm2d(cfg, w2), nn.LeakyReLU(0.2))
        blocks = []
        c_in = w2
        for width in cfg.encoder_widths:
            blocks.append(nn.Sequential(
                _conv_bn_relu(cfg, c_in, width),
                _conv_bn_relu(cfg, width, width),
            ))
            c_in = width
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d((2, 1))

    def forward(self, spec: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        expected = (2, self.cfg.stft.freq_bins, self.cfg.spec_frames)
        if spec.dim() != 4 or tuple(spec.shape[1:]) != expected:
            raise ShapeError(f"spectrogram must be B x {expected}, got {tuple(spec.shape)}")
        e1 = self.down1(spec)          # 128 x 2N
        e2 = self.down2(e1)            # 64 x N
        skips = [e1, e2]
        x = e2
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return x, skips


class MaskDecoder(nn.Module):
    """Mirror of AudioEncoder: fused features -> bounded mask channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.bound = cfg.mask_bound
        widths = cfg.encoder_widths
        w1, w2 = cfg.width(64), cfg.width(128)
        self.up = nn.Upsample(scale_factor=(2, 1), mode='nearest')
        blocks = []
        c_in = cfg.fusion_dim
        for k in reversed(range(len(widths))):
            c_out = widths[k - 1] if k > 0 else w2
            blocks.append(nn.Sequential(
                _conv_bn_relu(cfg, c_in + widths[k], c_out),
                _conv_bn_relu(cfg, c_out, c_out),
            ))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(w2 + w2, w1, 4, stride=2, padding=1, bias=False),
            _norm2d(cfg, w1),
            nn.ReLU(inplace=True),
        )
        out_channels = 2 * cfg.n_masks
        self.up2 = nn.ConvTranspose2d(w1 + w1, out_channels, 4, stride=2, padding=1, output_padding=(1, 0))

    def forward(self, fused: torch.Tensor, skips: List[torch.Tensor]) -> torch.Tensor:
        e1, e2, block_skips = skips[0], skips[1], skips[2:]
        x = fused
        for block, skip in zip(self.blocks, reversed(block_skips)):
            x = block(torch.cat([self.up(x), skip], dim=1))
        x = self.up1(torch.cat([x, e2], dim=1))
        x = self.up2(torch.cat([x, e1], dim=1))
        return torch.tanh(x) * self.bound


# ==================== Separator ====================

@dataclass
class VisualBatch:
    """Stacked visual inputs of one speaker per batch row."""
    rois: torch.Tensor      # B x N x H x W
    faces: torch.Tensor     # B x 3 x S x S

    @classmethod
    def from_inputs(cls, inputs: Sequence[FaceTrackInput], dtype: torch.dtype = torch.float32,
                    device: Union[str, torch.device] = 'cpu') -> 'VisualBatch':
        return cls(torch.as_tensor(stack_rois(inputs), dtype=dtype, device=device),
                   torch.as_tensor(stack_faces(inputs), dtype=dtype, device=device))


class AudioVisualSeparator(nn.Module):
    """Predicts bounded complex masks conditioned on each speaker's visuals."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lip = LipMotionEncoder(cfg) if cfg.uses_lips else None
        self.face = FaceEncoder(cfg) if cfg.uses_face else None
        self.audio_enc = AudioEncoder(cfg)
        self.audio_dec = MaskDecoder(cfg)
        self.vocal = VocalEncoder(cfg)

    def embed_face(self, faces: torch.Tensor) -> Optional[torch.Tensor]:
        return None if self.face is None else self.face(faces)

    def visual_features(self, visual: VisualBatch) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """B x V x N features and the B x V_f face embedding (None without a face stream).

        The audio-only variant has no visual streams and returns (None, None).
        """
        parts = []
        if self.lip is not None:
            parts.append(self.lip(visual.rois))
        face = self.embed_face(visual.faces)
        if face is not None:
            # Replicate the static face embedding along time
            parts.append(face.unsqueeze(2).expand(-1, -1, self.cfg.n_frames))
        if not parts:
            return None, None
        return torch.cat(parts, dim=1), face

    def forward(self, spec: torch.Tensor, visual: Optional[VisualBatch] = None,
                visual_b: Optional[VisualBatch] = None) -> Tuple[torch.Tensor, List[Optional[torch.Tensor]]]:
        """Masks B x (2|4) x F x T and the face embeddings used for conditioning.

        An audio-only model ignores any visuals passed in.
        """
        audio, skips = self.audio_enc(spec)
        if self.cfg.audio_only:
            return self.audio_dec(audio, skips), [None]
        if visual is None or self.cfg.dedicated != (visual_b is not None):
            raise ConfigError(
                f"{self.cfg.mode} model expects {'two speakers' if self.cfg.dedicated else 'one speaker'} of visuals"
            )
        features, face = self.visual_features(visual)
        parts = [audio, features.unsqueeze(2)]
        faces = [face]
        if visual_b is not None:
            features_b, face_b = self.visual_features(visual_b)
            parts.append(features_b.unsqueeze(2))
            faces.append(face_b)
        return self.audio_dec(torch.cat(parts, dim=1), skips), faces

    def embed_voice(self, spec: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """Vocal embedding of the masked spectrogram (X * M, top bin dropped)."""
        real, imag = complex_multiply(spec[:, 0], spec[:, 1], masks[:, 0], masks[:, 1])
        separated = torch.stack([real, imag], dim=1)[:, :, :EMBEDDING_FREQ_BINS]
        return self.vocal(separated)

    def parameter_groups(self) -> Dict[str, int]:
        return {
            name: sum(p.numel() for p in module.parameters())
            for name, module in self.named_children()
        }


def build_separator(cfg: ModelConfig, seed: int = 0) -> AudioVisualSeparator:
    """Separator with weights initialized from `seed`."""
    torch.manual_seed(seed)
    model = AudioVisualSeparator(cfg)
    logger.info(
        f"[Model] Built {cfg.mode} separator ({cfg.visual_feature}, scale {cfg.channel_scale}): "
        + ', '.join(f"{k}={v:,}" for k, v in model.parameter_groups().items())
    )
    return model


# ==================== Operations ====================

def _device_dtype(model: nn.Module) -> Tuple[torch.device, torch.dtype]:
    param = next(model.parameters())
    return param.device, param.dtype


def _spec_tensor(x: ComplexSpectrogram, model: nn.Module) -> torch.Tensor:
    device, dtype = _device_dtype(model)
    return torch.as_tensor(x.stacked()[None], dtype=dtype, device=device)


def lip_motion_encoder(rois: np.ndarray, model: AudioVisualSeparator) -> np.ndarray:
    """N x H x W mouth ROIs -> V_l x N lip-motion features."""
    if model.lip is None:
        raise ConfigError("model has no lip-motion stream")
    device, dtype = _device_dtype(model)
    model.eval()
    with torch.no_grad():
        out = model.lip(torch.as_tensor(np.asarray(rois)[None], dtype=dtype, device=device))
    return out[0].cpu().numpy()


def face_attr_encoder(image: np.ndarray, model: AudioVisualSeparator) -> Embedding:
    """One RGB face image (3 x S x S or S x S x 3) -> unit-norm face embedding."""
    if model.face is None:
        raise ConfigError("model has no facial attributes stream")
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[-1] == 3 and image.shape[0] != 3:
        image = image.transpose(2, 0, 1)
    device, dtype = _device_dtype(model)
    model.eval()
    with torch.no_grad():
        out = model.face(torch.as_tensor(np.ascontiguousarray(image)[None], dtype=dtype, device=device))
    return Embedding(out[0].cpu().numpy().astype(np.float64), 'face')


def vocal_attr_encoder(sep_spec: Union[ComplexSpectrogram, np.ndarray],
                       model: AudioVisualSeparator) -> Embedding:
    """Cropped separated spectrogram (2 x 256 x T) -> unit-norm voice embedding."""
    stacked = sep_spec.stacked() if isinstance(sep_spec, ComplexSpectrogram) else np.asarray(sep_spec)
    device, dtype = _device_dtype(model)
    model.eval()
    with torch.no_grad():
        out = model.vocal(torch.as_tensor(stacked[None], dtype=dtype, device=device))
    return Embedding(out[0].cpu().numpy().astype(np.float64), 'voice')


def audio_encoder(spec: Union[ComplexSpectrogram, np.ndarray], model: AudioVisualSeparator) -> np.ndarray:
    """2 x 257 x 4N spectrogram -> D x 1 x N bottleneck."""
    stacked = spec.stacked() if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    device, dtype = _device_dtype(model)
    model.eval()
    with torch.no_grad():
        out, _ = model.audio_enc(torch.as_tensor(stacked[None], dtype=dtype, device=device))
    return out[0].cpu().numpy()


def predict_masks(X: ComplexSpectrogram, visual_A: Optional[FaceTrackInput], visual_B: Optional[FaceTrackInput],
                  model: AudioVisualSeparator) -> List[ComplexMask]:
    """One mask (general mode), masks for A then B (dedicated mode), or two
    unordered masks (audio-only, visuals ignored), each 2 x F x T."""
    cfg = model.cfg
    spec = _spec_tensor(X, model)
    if cfg.audio_only:
        visual = visual_b = None
    else:
        if visual_A is None or cfg.dedicated != (visual_B is not None):
            n = sum(v is not None for v in (visual_A, visual_B))
            raise ConfigError(f"{cfg.mode} model called with {n} speaker(s) of visuals")
        device, dtype = _device_dtype(model)
        visual = VisualBatch.from_inputs([visual_A], dtype, device)
        visual_b = VisualBatch.from_inputs([visual_B], dtype, device) if visual_B is not None else None
    model.eval()
    with torch.no_grad():
        masks, _ = model(spec, visual, visual_b)
    values = masks[0].cpu().numpy().astype(np.float64)
    return [
        ComplexMask(values[2 * k], values[2 * k + 1], cfg.mask_bound)
        for k in range(values.shape[0] // 2)
    ]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

