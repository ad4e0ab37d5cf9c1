"""Run the desk-scale recovery experiments and write their outputs.

    python scripts/desk_scale.py --mask s_only_dense --out runs/desk_s
    python scripts/desk_scale.py --mask xs_every_8th --out runs/desk_x
"""
import argparse
import time
from pathlib import Path

from graybox.adjoint import MASK_MODES
from graybox.datagen import save_corpus
from graybox.experiments import DESK_SEED, desk_corpus, run_desk
from graybox.nn import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mask", choices=MASK_MODES, default="s_only_dense")
    ap.add_argument("--seed", type=int, default=DESK_SEED)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--every", type=int, default=100, help="progress print interval (epochs)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = desk_corpus(args.seed)
    save_corpus(corpus, out / "corpus.gbx")
    t0 = time.perf_counter()

    def progress(stage, epoch, p, rec, improved):
        if epoch % args.every == 0:
            print(f"stage {stage} epoch {epoch:5d} train {rec.train.loss_ratio:9.3f} "
                  f"val {rec.val.loss_ratio:9.3f} {time.perf_counter() - t0:7.0f}s", flush=True)

    res = run_desk(args.mask, seed=args.seed, corpus=corpus, callback=progress)
    res.history.write_csv(out / "history.csv")
    save_checkpoint(res.params, out / "final.ckpt")
    lines = res.history.termination_lines() + [
        f"test_loss_ratio={res.test_ratio!r}", f"mu_rmse={res.mu_rmse!r}",
        f"seconds={res.seconds:.1f}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
