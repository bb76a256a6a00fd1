"""End-to-end miniature run: generate one clip, overfit a small model for a
couple hundred steps, and score the predictions with the saliency metrics.

Takes about a minute on a laptop CPU.
"""

import numpy as np

from trisal import data as D
from trisal import metrics as MT
from trisal import model as M

clip = D.generate_clip(D.ClipSpec(seed=42, frames=6, size=64, contrast=0.9, speed=1.5))
cfg = M.ModelConfig(width=8, cp_width=8, batch_size=2, steps=250, lr_backbone=1e-3, lr_head=1e-2)
model = M.build(cfg)
print("parameters:", model.parameter_count())

log = M.fit(model, clip, cfg, on_step=lambda s, l: print(f"  step {s:3d} loss {l:.4f}") if s % 50 == 0 else None)
print("loss:", f"{log[0][1]:.3f} -> {log[-1][1]:.3f}")

batch = M.make_batch(clip, range(len(clip)))
probs = M.predict(model, batch[0], batch[1], batch[2])
frames = [(probs[i, 0], clip[i].gt[0]) for i in range(len(clip))]
report = MT.evaluate_sequences([("demo", frames)])
agg = report.aggregate
print("max F:", round(agg["max_f"], 4), " S:", round(agg["s_measure"], 4), " MAE:", round(agg["mae"], 4))

# Side outputs are a pyramid; the finest is half resolution before the final
# upsample, and each level is supervised during training.
model.eval()
outs = model(batch[0], batch[1], batch[2])
print("side output sizes:", [tuple(s.shape[2:]) for s in outs])

# Crude ASCII rendering of the finest prediction vs ground truth.
p8 = probs[0, 0][::8, ::8]
g8 = clip[0].gt[0][::8, ::8]
for pr, gr in zip(p8, g8):
    left = "".join(".:*#"[min(3, int(v * 4))] for v in pr)
    right = "".join("#" if v else "." for v in gr)
    print(left, " ", right)
