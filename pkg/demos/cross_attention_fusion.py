"""Cross-attention over unequal-length sequences, and the full fusion forward."""

import numpy as np

from vemoclap.autograd import Tensor
from vemoclap.container import EmotionLabel, VideoFeatures
from vemoclap.model import ModelConfig, cross_attention, forward, init_params, param_count

rng = np.random.default_rng(0)

# A small config: common dimension 16, 4 heads, 6 frames per video.
dims = {"clip": 12, "beats": 10, "expression": 10, "ocr_sentiment": 4, "asr_sentiment": 4}
config = ModelConfig(input_dims=dims, d=16, heads=4, dropout_p=0.0, n=6)
params = init_params(config, seed=1)
print("pairings:", config.pairings)
print("trainable parameters:", param_count(params))

# One attention module fuses a 6-row query sequence with a 9-row key/value
# sequence; the output always has the query's temporal length.
q_seq = Tensor(rng.standard_normal((6, 12)).astype(np.float32))
kv_seq = Tensor(rng.standard_normal((9, 10)).astype(np.float32))
fused = cross_attention(q_seq, kv_seq, params.pairings[0], heads=config.heads)
print("attention output shape:", fused.shape)

# No positional encoding anywhere, so shuffling key/value rows changes
# nothing (queries only see the set of rows):
perm = rng.permutation(9)
shuffled = cross_attention(q_seq, Tensor(kv_seq.data[perm]), params.pairings[0], heads=4)
print("max deviation under kv permutation:", np.abs(shuffled.data - fused.data).max())

# Masked rows get a -1e9 score bias and drop out of the softmax entirely:
extended = Tensor(np.vstack([kv_seq.data, rng.standard_normal((1, 10)).astype(np.float32)]))
mask = np.array([True] * 9 + [False])
masked = cross_attention(q_seq, extended, params.pairings[0], heads=4, kv_mask=mask)
print("max deviation after appending a masked row:", np.abs(masked.data - fused.data).max())

# The full forward: three pooled attention vectors + two sentiment vectors
# -> linear head -> softmax over the six emotions.
video = VideoFeatures(
    video_id="demo",
    label=EmotionLabel.JOY,
    clip=rng.uniform(0, 1, (6, 12)).astype(np.float32),
    beats=rng.uniform(0, 1, (6, 10)).astype(np.float32),
    expression=rng.uniform(0, 1, (2, 10)).astype(np.float32),
    expression_frame_index=np.array([1, 4]),
    ocr_sentiment=rng.uniform(0, 1, 4).astype(np.float32),
    asr_sentiment=rng.uniform(0, 1, 4).astype(np.float32),
)
probs = forward(video, params, config)
for label, p in zip(EmotionLabel, probs.data):
    print(f"  {label.label_name:<9} {p:.4f}")
print("sum:", probs.data.sum())
