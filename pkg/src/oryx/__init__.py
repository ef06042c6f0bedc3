"""Native-resolution visual tokenization with on-demand token compression."""
from .compressor import DownsampleVariant, DynamicCompressor, compress
from .encoder import EncoderConfig, OryxViT
from .geometry import PatchGrid, Resolution, patch_grid, plan_image_resolution, plan_video_resolution
from .packing import PackedBatch, pack, segment_attention, unpack
from .planner import Category, CompressionPlan, make_plan
from .structures import FeatureMap, Modality, VisualInput

__version__ = "0.1.0"
