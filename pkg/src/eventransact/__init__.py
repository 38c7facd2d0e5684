"""Event-camera action recognition with a Video Transformer Network trained
with cross-entropy and an event-contrastive loss."""

from .estimator import EventFrameEncoder, EventTransActClassifier
from .events_io import (
    EventRecord,
    EventStream,
    GestureSegment,
    parse_aedat,
    parse_canonical,
    parse_gesture_labels,
    slice_stream,
    synth_stream,
    write_canonical,
)
from .frames import (
    AugmentConfig,
    Clip,
    ClipSpec,
    EncoderConfig,
    EventFrame,
    Video,
    encode_frames,
    event_drop,
    make_two_views,
    sample_clip_random,
    sample_clips_uniform,
)
from .losses import LossConfig, cross_entropy, cosine_sim_exp, event_contrastive, total_loss
from .model import VTN, ModelConfig, count_params, load_model, save_model
from .pipeline import (
    EvalReport,
    TimingReport,
    TrainConfig,
    adam_step,
    benchmark,
    evaluate,
    lr_at,
    predict_video,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "EventFrameEncoder",
    "EventTransActClassifier",
    "EventRecord",
    "EventStream",
    "GestureSegment",
    "parse_aedat",
    "parse_canonical",
    "parse_gesture_labels",
    "slice_stream",
    "synth_stream",
    "write_canonical",
    "AugmentConfig",
    "Clip",
    "ClipSpec",
    "EncoderConfig",
    "EventFrame",
    "Video",
    "encode_frames",
    "event_drop",
    "make_two_views",
    "sample_clip_random",
    "sample_clips_uniform",
    "LossConfig",
    "cross_entropy",
    "cosine_sim_exp",
    "event_contrastive",
    "total_loss",
    "VTN",
    "ModelConfig",
    "count_params",
    "load_model",
    "save_model",
    "EvalReport",
    "TimingReport",
    "TrainConfig",
    "adam_step",
    "benchmark",
    "evaluate",
    "lr_at",
    "predict_video",
    "train",
]
