"""
Train, stream and intervene on a small synthetic procedure set
==============================================================

Phases 1 and 3 render with the same template, so a single window cannot
tell them apart; only memory of what came before can.  This is a scaled
down version of the experiment in the acceptance suite and runs in a
couple of minutes.
"""

import numpy as np

from phasemem import inference as I
from phasemem import synthdata as S
from phasemem import training as TR
from phasemem.metrics import evaluate
from phasemem.model import ModelConfig

gen = S.GeneratorConfig(n_phases=5, durations=[[30, 60]] * 5, skip_probs=[0.0] * 5,
                        image_size=16, ambiguous_pairs=[[1, 3]], n_train=8, n_val=2, n_test=3)
data = S.generate_dataset(gen)
train, val, test = (S.split_records(data, s) for s in ("train", "val", "test"))
print("train frames:", sum(len(r.labels) for r in train))

models = {}
for mode in ("none", "full"):
    cfg = ModelConfig(n_phases=5, image_size=16, patch_size=8, window=8, mem_mode=mode,
                      intervals=(16, 32, 64))
    params, log = TR.fit(train, cfg, TR.TrainConfig(epochs=4), val)
    models[mode] = (params, cfg)
    report = evaluate(I.predict_dataset(params, cfg, test), cfg.n_phases)
    print(mode, "video accuracy %.3f" % report.video_accuracy_mean)

# stream one test video frame by frame with the memory model
params, cfg = models["full"]
video = test[0]
session = I.OnlineSession(params, cfg)
for frame in video.frames:
    session.push_frame(frame)
pred = np.asarray(session.predictions)
print("streamed accuracy on", video.video_id, "%.3f" % (pred == video.labels).mean())

# erase phase 2 from the history right as phase 3 begins; cached impressions
# also carry context, so a small model may not change its mind at all
start = int(np.flatnonzero(video.labels == 3)[0])
after = I.counterfactual_replay(params, cfg, video, [(start, I.HistoryEdit.erase(2))])
changed = np.flatnonzero(after != pred)
print("predictions changed by the edit:", len(changed))
if len(changed):
    print("first changed frame", changed[0], "was", pred[changed[0]], "now", after[changed[0]])
