"""Two-stage render-and-refine reasoning segmentation with group-relative policy optimization."""

from .geometry import BBox, Point2D, box_iou, hungarian_assign, mask_iou, match_count, rasterize_rect_union
from .codec import Completion, PromptGroup, Stage1Answer, Stage2Answer, format_reward, parse_completion, render_prompt
from .rewards import LengthRewardParams, RewardBreakdown, stage1_reward, stage2_reward
from .render import OverlayStyle, overlay
from .segmenter import OracleSegmenter, PromptSet, RemoteSegmenter, SyntheticScene, TransportError
from .policy import RemoteChatPolicy, ToyPolicy
from .grpo import GrpoConfig, GrpoTrainer, infer, run_episode
from .metrics import EvalRecord, ciou, f1, giou, summarize
from .data import Dataset, Sample, SplitSpec, load_manifest, split, synth_generate, write_manifest

__version__ = "0.1.0"
