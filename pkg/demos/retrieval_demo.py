"""Two-minute retrieval pretraining demo.

Trains the 4x4x2 compression encoder and toy DiT on the frame-retrieval
objective for a short budget and reports held-out retrieval PSNR against
the non-learned baselines (copy-nearest-clean-frame and dataset mean).
The model will not beat the baselines in two minutes — the full recipe in
the acceptance suite does — but the PSNR should climb visibly while the
ctx-usage probe shows the model beginning to read its compressed memory.
"""

import time

import numpy as np

from memctx import data, diffusion, metrics, nn, training
from memctx.tensor import no_grad

STEPS = 1500


def ctx_usage_delta(enc, g, eval_ds, n=4):
    """Eval PSNR with the true compressed context minus with a zeroed one."""
    true_scores, zero_scores = [], []
    for k in range(n):
        lat, cond = eval_ds[k % len(eval_ds)]
        omega = data.sample_omega(lat.shape[0], (9, 0xE7A1, k))
        masked = diffusion.mask_history(lat, omega, (9, 0xE7A3, k))
        targets = sorted(omega.indices)[:4]
        shape = (len(targets),) + lat.shape[1:]
        with no_grad():
            ctx = enc.compress(masked)
            recon = diffusion.sample(g, ctx, cond, shape, seed=(9, 0xE7A4, k),
                                     steps=4, frame_indices=targets)
            ctx.tokens = ctx.tokens * 0.0
            blind = diffusion.sample(g, ctx, cond, shape, seed=(9, 0xE7A4, k),
                                     steps=4, frame_indices=targets)
        true_scores.append(metrics.psnr(recon, lat[targets]))
        zero_scores.append(metrics.psnr(blind, lat[targets]))
    return float(np.mean(true_scores)), float(np.mean(true_scores) - np.mean(zero_scores))


def main():
    train_ds = training.make_dataset(100, 64)
    eval_ds = training.make_dataset(200, 4)
    enc, g = training.build_models(0, rate=(4, 4, 2))
    opt = nn.Adam(training._all_params(enc, g), lr=3e-3)
    dist = diffusion.TimestepDistribution(mu=2.0, sigma=0.8)

    base = training.evaluate_retrieval_baselines(eval_ds, seed=9, n_eval=4)
    print(f"baselines: copy-nearest {base['copy_nearest_psnr']:.2f} dB, "
          f"dataset-mean {base['dataset_mean_psnr']:.2f} dB")

    t0 = time.time()

    def on_step(step, loss):
        if step % 300 == 0:
            psnr, delta = ctx_usage_delta(enc, g, eval_ds)
            print(f"step {step:5d}  loss {loss:.3f}  retrieval {psnr:.2f} dB  "
                  f"ctx-usage {delta:+.2f} dB  ({time.time() - t0:.0f}s)")

    training.pretrain_retrieval(enc, g, train_ds, steps=STEPS, seed=1,
                                optimizer=opt, timestep_dist=dist, on_step=on_step)


if __name__ == "__main__":
    main()
