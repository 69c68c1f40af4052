"""
Train, sample and evaluate a small model
========================================

The full pipeline on 32x32 phantoms with a tiny network and a 50-step
schedule, so it finishes in well under a minute. The `ssmdose` command runs
the same steps at the default scale.
"""

import numpy as np

from ssmdose.metrics import dose_score
from ssmdose.network import UNetConfig
from ssmdose.phantoms import PhantomSpec, generate_phantom
from ssmdose.training import RunConfig, ScheduleConfig, Trainer, parameter_report, predict_doses

model = UNetConfig(image_size=32, patch_size=4, base_channels=8, depth=2, n_state=4, time_embed_dim=16, num_steps=50)
cfg = RunConfig(model=model, schedule=ScheduleConfig(T=50), epochs=10, batch_size=4)

train = [generate_phantom(PhantomSpec(seed=s, H=32, W=32)) for s in range(8)]
test = [generate_phantom(PhantomSpec(seed=100 + s, H=32, W=32)) for s in range(2)]

trainer = Trainer(cfg, train)
print("parameters", parameter_report(trainer.model))
for _ in range(cfg.epochs):
    recs = trainer.train_epoch()
    print(f"epoch {recs[0].epoch}  loss {np.mean([r.loss for r in recs]):8.2f}  lr {recs[0].lr:.4f}")

pred = predict_doses(trainer.model, np.stack([p.structure for p in test]), trainer.sched, np.random.default_rng(0))
for p, d in zip(test, pred.dose):
    print("dose score", round(dose_score(d[0], p.dose[0], p.body), 4))
print(f"{pred.seconds_per_step * 1000:.1f} ms per reverse step")
