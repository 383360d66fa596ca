"""Train a 2D registration network for a short while and score it.

A few hundred steps are enough to see Dice rise above the unregistered
baseline. The acceptance suite trains for 3000.
"""
import tempfile
from pathlib import Path

import numpy as np

from morphflow.evaluation import evaluate_registration, identity_field_source, network_field_source
from morphflow.network import model1
from morphflow.synth import PhantomSpec, load_manifest, write_dataset
from morphflow.trainer import TrainConfig, train

work = Path(tempfile.mkdtemp())
write_dataset(work / "data", PhantomSpec(shape=(64, 64), n_structures=5, seed=0), 24, {"train": 20, "test": 4})
train_pairs = load_manifest(work / "data" / "train.json", dtype=np.float32)
test_pairs = load_manifest(work / "data" / "test.json")

cfg = TrainConfig(learning_rate=1e-3, iterations=400, arch=model1(2), checkpoint_interval=100, out_dir=str(work / "run"))
result = train(cfg, train_pairs)
for row in result.log[::100]:
    print(f"step {row['iter']:>4}  loss {row['loss']:.1f}")

before = evaluate_registration(identity_field_source, test_pairs)
after = evaluate_registration(network_field_source(result.params), test_pairs)
print(f"test Dice: unregistered {before.mean:.3f}, network {after.mean:.3f}")
print("checkpoints:", ", ".join(p.name for p in result.checkpoints))
