"""Train the detector on normal traces, calibrate a threshold, flag a fault.

The detector learns to predict each step's embedding from the query and the
steps before it; an attention-refined prototype anchors what "normal" looks
like. A step is flagged when

    alpha * ||x_hat - x||^2 + beta * (1 - cos(x_hat, p))  >  delta
"""

import random

from masc import (
    BackboneSpec,
    EmbedderSpec,
    TrainConfig,
    calibrate_threshold,
    embed_trajectory,
    score_trajectory,
    train,
)
from masc.synthetic import make_normal_corpus, make_normal_trajectory, plant_anomaly

embedder = EmbedderSpec(kind="hashing", dimension=32)
config = TrainConfig(
    epochs=8,
    lr=1e-3,
    lam=0.2,  # weight of the prototype-alignment loss
    seed=0,
    d_h=64,
    embedder=embedder,
    backbone=BackboneSpec(hidden_dim=64, layers=2, seed=0),
)

corpus = make_normal_corpus(60, seed=100, T=6)
model, report = train(config, corpus)
print("training loss by epoch (recon + lambda * proto):")
for i, epoch in enumerate(report.epochs, start=1):
    print(f"  epoch {i}: total {epoch.mean_total:.4f} "
          f"(recon {epoch.mean_recon:.4f}, proto {epoch.mean_proto:.4f})")
print(f"parameter digest: {report.param_digest[:16]}...\n")

# Threshold = 99th percentile of scores on normal traces.
calibration = calibrate_threshold(model, corpus, quantile=0.99, alpha=1.0, beta=1.0)
print(f"calibrated delta (q=0.99): {calibration.delta:.3f}\n")

# Plant an anomaly in a fresh trajectory and watch the scores.
rng = random.Random(5)
probe = plant_anomaly(make_normal_trajectory("probe", rng, T=6, labeled=True), 4, rng)
q_vec, step_embs = embed_trajectory(embedder, probe)
print("step scores on a trace with an anomaly planted at t=4:")
for verdict in score_trajectory(model, q_vec, step_embs, 1.0, 1.0, calibration.delta):
    marker = " <-- flagged" if verdict.flagged else ""
    print(f"  t={verdict.t}: score {verdict.score:.3f} "
          f"(recon {verdict.recon_term:.3f}, proto {verdict.proto_term:.3f}){marker}")
