#!/usr/bin/env python3
"""Export the synthetic compositional benchmark to a JSONL task file.

Usage: python3 scripts/export_benchmark.py out.jsonl [seed]
"""
import sys

from skillroute.tasks import GeneratorConfig, export_tasks, \
    generate_compositional_tasks


def run(path: str, seed: int = 0) -> None:
    taskset = generate_compositional_tasks(GeneratorConfig(seed=seed))
    export_tasks(taskset, path)
    n_train = len(taskset.train_tasks)
    n_test = len(taskset.test_tasks)
    print(f"wrote {n_train} train / {n_test} test tasks, "
          f"vocab {len(taskset.vocab)} -> {path}")


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print(__doc__.strip(), file=sys.stderr)
        sys.exit(2)
    run(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 0)
