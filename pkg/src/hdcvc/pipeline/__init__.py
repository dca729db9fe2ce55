from .checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from .codec import (
    FrameBuffer,
    GopConfig,
    SequenceResult,
    decode_frame_i,
    decode_frame_p,
    decode_sequence,
    encode_frame_i,
    encode_frame_p,
    encode_sequence,
    p_forward,
    rd_point,
)
from .losses import RdLambda, distortion, loss_rc, loss_total
from .training import TrainConfig, TrainResult, train, train_stages, train_variant
