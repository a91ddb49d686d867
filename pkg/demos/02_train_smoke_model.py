# %% [markdown]
# # Desk-scale training
#
# Both training stages on the bundled synthetic speech.  Stage 1 learns the
# VQ autoencoder, the localizer and the restorer through random distortions.
# Stage 2 freezes them and fits the manipulator to predict masked tokens.
# About eight minutes on one CPU core.

# %%
import time
from pathlib import Path

import numpy as np

from tokenmark import checkpoint
from tokenmark.corpus import synthetic_corpus
from tokenmark.metrics import plot_loss_curve
from tokenmark.training import masked_accuracy, smoke_config, tokenize_corpus, train_stage1, train_stage2

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

corpus = synthetic_corpus(64, 1.0, seed=0)
cfg = smoke_config()
print(f"{len(corpus)} clips, stage 1 {cfg.stage1_steps} steps, stage 2 {cfg.stage2_steps} steps")

# %%
t0 = time.perf_counter()
model = train_stage1(corpus, cfg, log_path=out / "stage1.jsonl")
print(f"stage 1 done in {time.perf_counter() - t0:.0f} s")
last = model.train_log[-50:]
for key in ("loc_acc", "res_acc", "rec"):
    print(f"  {key}: {np.mean([r[key] for r in last]):.3f}")
print("  calibration:", model.calibration)

# %%
t0 = time.perf_counter()
model = train_stage2(corpus, model, cfg, out_path=out / "smoke.npz", log_path=out / "stage2.jsonl")
print(f"stage 2 done in {time.perf_counter() - t0:.0f} s")
held_out = tokenize_corpus(model, synthetic_corpus(12, 1.0, seed=99))
top1, baseline = masked_accuracy(model.manipulator, held_out)
print(f"manipulator masked top-1 {top1:.3f} against marginal baseline {baseline:.3f}")

# %%
plot_loss_curve(model.train_log[: cfg.stage1_steps], out / "stage1_loss.png")
print("checkpoint:", out / "smoke.npz", checkpoint.read_config(out / "smoke.npz")["stages"])
