# %% [markdown]
# # Synthetic benchmark
# Generate a seeded scene, train the trajectory model on normal tracks, score
# the anomalous test videos and report frame-level AUROC / AP.  Settings are
# reduced so the script finishes in about a minute; the acceptance suite uses
# the full configuration.

# %%
import tempfile
from pathlib import Path

import numpy as np

from trajvad.evaluation import evaluate, format_report
from trajvad.pipeline import fit, load_split, score
from trajvad.synth import benchmark_scenarios, generate
from trajvad.training import TrainConfig

root = Path(tempfile.mkdtemp())
train_cfg, test_cfg = benchmark_scenarios("benchmark", seed=0, train_videos=8, test_videos=4)
for cfg, name in ((train_cfg, "train"), (test_cfg, "test")):
    scene = generate(cfg)
    scene.write(root / name)
    print(name, len(scene.detections), "detections", len(scene.events), "anomaly events")

train_split, test_split = load_split(root / "train"), load_split(root / "test")
labels = np.concatenate([g.labels for g in test_split.truths.values()])
print("anomalous frame fraction", labels.mean())

# %% [markdown]
# ## Trajectory-only model

# %%
model = fit(TrainConfig(variant="t", K=6, epochs=3), train_split)
print("epoch losses", np.round(model.history, 4))
series, n_segments = score(model, test_split)
print(n_segments, "test windows")
print(format_report(evaluate(series, test_split.truths)))

# %% [markdown]
# ## Frame scores of one video
# Frame score is the max over covering windows; the labelled interval should
# stand out.

# %%
s = series[0]
gt = test_split.truths[s.video_id].labels
print("mean score  normal", s.scores[gt == 0].mean(), " anomalous", s.scores[gt == 1].mean())

# %% [markdown]
# ## Leave one group out
# Dropping the confidence feature removes the only channel that sees a
# confidence collapse.

# %%
from trajvad.features import group_mask

no_conf = TrainConfig(variant="t", K=6, epochs=3, feature_mask=tuple(group_mask("confidence")))
abl = fit(no_conf, train_split)
abl_series, _ = score(abl, test_split)
full, drop = evaluate(series, test_split.truths), evaluate(abl_series, test_split.truths)
print("delta AUROC", drop["auroc"] - full["auroc"])
