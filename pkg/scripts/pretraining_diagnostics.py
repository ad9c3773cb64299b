"""Two-phase pretraining on a synthetic corpus, printing held-out diagnostics per phase.

    python3 scripts/pretraining_diagnostics.py --records 10000 --mlm-steps 800 --evolution-steps 800
"""

import argparse
import logging
import time

from abevo.corpus import shuffle_and_chunk, split_chunks
from abevo.model import ModelConfig
from abevo.simgen import GeneLibrary, LibraryConfig, RepertoireSpec, generate_repertoire
from abevo.train import TrainConfig, pretrain, write_log

LIBRARY = LibraryConfig(v_len_min=28, v_len_max=34, d_len_min=4, d_len_max=8, j_len_min=8, j_len_max=10)


def corpus(n, seed=0):
    spec = RepertoireSpec(n_profiles=1, sequences_per_profile=n, shm_rate=0.05, stage_multipliers=(1.0,) * 6,
                          seed=seed)
    records = generate_repertoire(spec, GeneLibrary.random(LIBRARY))
    return split_chunks(shuffle_and_chunk(records, n - n // 10, seed=seed))


def run(n_records=10_000, mlm_steps=800, evolution_steps=800, eval_records=500, seed=0):
    train, valid = corpus(n_records, seed)
    mlm = TrainConfig(phase="mlm", steps=mlm_steps, lr=1e-3, warmup=100, eval_interval=mlm_steps,
                      eval_records=eval_records, seed=seed)
    evo = TrainConfig(phase="evolution", steps=evolution_steps, lr=3e-4, warmup=100,
                      eval_interval=evolution_steps, eval_records=eval_records, seed=seed)
    res = pretrain(train, valid, ModelConfig(dtype="float32", seed=seed), mlm, evo)
    mlm_only = [d for d in res.history if d.phase == "mlm"][-1]
    return mlm_only, res.history[-1], res


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--records", type=int, default=10_000)
    ap.add_argument("--mlm-steps", type=int, default=800)
    ap.add_argument("--evolution-steps", type=int, default=800)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="write the training log CSV here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    t = time.perf_counter()
    mlm_only, full, res = run(args.records, args.mlm_steps, args.evolution_steps, seed=args.seed)
    print(f"{'model':<12}{'mlm':>8}{'agp':>8}{'position':>10}{'mutation':>10}")
    for name, d in (("MLM only", mlm_only), ("MLM+AGP+MPP", full)):
        print(f"{name:<12}{d.mlm_accuracy:8.3f}{d.germline_accuracy:8.3f}{d.position_accuracy:10.3f}"
              f"{d.mutation_accuracy:10.3f}")
    print(f"elapsed {time.perf_counter() - t:.0f} s")
    if args.log:
        write_log(res.log_rows, args.log)


if __name__ == "__main__":
    main()
