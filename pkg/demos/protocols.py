"""
Evaluation protocols
====================

The three ways of thinning the target domain: uniform sparsification,
cold-start users that emerge from it, and users whose target history is
removed entirely.
"""

import tempfile
from pathlib import Path

from crossrec import data, synthetic

base = synthetic.cross_domain(m=500, n_s=60, n_t=60, density_s=0.2, density_t=0.12, seed=4)

# %%
# Uniform removal of K% of the target train ratings.  Users left with fewer
# than five target train ratings count as cold-start.
for K in data.PUBLISHED_K["sparse"]:
    ds = data.apply_protocol(base, data.ProtocolSpec("cold_start", K, seed=1))
    counts = ds.label_counts()
    print(f"K={K:2d}  train {counts['train']:5d}  removed {counts['removed']:5d}  cold users {len(ds.focus_users)}")

# %%
# Full cold start: K% of users lose every target train rating but keep their
# source history, which is all a model can use for them.
for K in data.PUBLISHED_K["full_cold_start"]:
    ds = data.apply_protocol(base, data.ProtocolSpec("full_cold_start", K, seed=1))
    users = ds.focus_users
    print(f"K={K:2d}  users {len(users):3d}  their target train ratings {int(ds.target_train_counts[users].sum())}")

# %%
# A protocol instance is saved as a label manifest next to the aligned data.
ds = data.apply_protocol(base, data.ProtocolSpec("full_cold_start", 20, seed=1))
with tempfile.TemporaryDirectory() as tmp:
    data.save_dataset(base, Path(tmp) / "dataset.json")
    data.save_manifest(ds, Path(tmp) / "split.json")
    again = data.load_manifest(data.load_dataset(Path(tmp) / "dataset.json"), Path(tmp) / "split.json")
print("manifest round trip:", (again.labels == ds.labels).all())
