"""Retuned pilot: faster alpha anneal, flat outer lr, sigma sweep."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from epg.config import EpgConfig
from epg.envs import make_distribution
from epg.outerloop import train_epg

epochs = int(sys.argv[1]); sigma = float(sys.argv[2]); anneal = int(sys.argv[3])
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 1
cfg = EpgConfig(workers=32, noise_vectors=8, epochs=epochs, inner_steps=4096,
                update_freq=64, buffer_size=512, sigma=sigma,
                alpha_anneal_epochs=anneal, lr_outer_anneal_epochs=epochs,
                policy_hidden=[32, 32])
dist = make_distribution("directional-point")
t0 = time.time()
def progress(row):
    print(f"epoch {row['epoch']:4d} mean {row['mean_fitness']:8.2f} "
          f"std {row['std_fitness']:7.2f} max {row['max_fitness']:8.2f} "
          f"alpha {row['alpha']:.2f} [{time.time()-t0:7.1f}s]", flush=True)
result = train_epg(cfg, dist, master_seed=seed, n_jobs=2, progress=progress,
                   out_dir=f"runs/pilot2_s{sigma}_a{anneal}_seed{seed}", config_hash="pilot")
