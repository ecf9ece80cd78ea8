"""Short sweeps over sigma / mirrored sampling with matched lifetimes."""
import sys
import time

sys.path.insert(0, "src")
import numpy as np

from epg.config import EpgConfig
from epg.envs import make_distribution
from epg.outerloop import train_epg

epochs, sigma, anneal, mirrored, seed = (int(sys.argv[1]), float(sys.argv[2]),
                                         int(sys.argv[3]), sys.argv[4] == "1",
                                         int(sys.argv[5]))
cfg = EpgConfig(workers=32, noise_vectors=8, epochs=epochs, inner_steps=4096,
                update_freq=64, buffer_size=512, sigma=sigma,
                alpha_anneal_epochs=anneal, lr_outer_anneal_epochs=epochs,
                mirrored_sampling=mirrored, policy_hidden=[32, 32])
dist = make_distribution("directional-point")
t0 = time.time()


def progress(row):
    print(f"epoch {row['epoch']:4d} mean {row['mean_fitness']:8.2f} "
          f"std {row['std_fitness']:7.2f} max {row['max_fitness']:8.2f} "
          f"alpha {row['alpha']:.2f} [{time.time()-t0:6.1f}s]", flush=True)


train_epg(cfg, dist, master_seed=seed, n_jobs=2, progress=progress)
