"""Cut multi-view training samples out of a posed scan sequence.

The sequence here is synthetic: a sensor circling a scene. Keyframes are
kept by time or distance, random runs of keyframes are merged into views,
and a sample is kept only if its views form one connected overlap graph.
"""

import numpy as np

from flowreg import CurationConfig, generate_samples
from flowreg.curation import select_keyframes, synthetic_sequence

seq = synthetic_sequence(np.random.default_rng(0), n_frames=60)
cfg = CurationConfig(tau_time=0.3, tau_space=0.5, beta=1.0, T_max=10, N_min=2, N_max=4, F_min=1, F_max=2,
                     d_max=10.0, eps_overlap=0.05, v_overlap=0.5)
keys = select_keyframes(seq, cfg.tau_time, cfg.tau_space)
print(f"{len(seq.frames)} frames, {len(keys)} keyframes")

skipped = []
samples = generate_samples(seq, cfg, np.random.default_rng(0), skipped)
print(f"{len(samples)} samples kept, {len(skipped)} draws gave up after {cfg.T_max} tries")
for s in samples[:3]:
    edges = ", ".join(f"{i}-{j} ({r:.2f})" for i, j, r in s.overlap_edges)
    print(f"  {len(s.views)} views, overlap edges {edges}")
