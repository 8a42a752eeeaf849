"""Generate the certified 42-task Agent World evaluation suite.

The task list is defined by this artifact (seeds 0..41 of the perfect
world generator); every task is checked by the solver before it is written.

    python3 scripts/make_suite.py --out configs/suite_42.json
"""
import argparse
import json
from pathlib import Path

from worldqa.agent_world.generate import WorldConfig
from worldqa.cli import world_spec
from worldqa.evaluator import SuiteTask, certify


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="configs/suite_42.json")
    ap.add_argument("--count", type=int, default=42)
    ap.add_argument("--first-seed", type=int, default=0)
    args = ap.parse_args()
    wc = WorldConfig.perfect()
    tasks = []
    for seed in range(args.first_seed, args.first_seed + args.count):
        spec = world_spec(wc, seed)
        tasks.append(SuiteTask(spec["task"]["task_id"], spec))
    certify(tasks)
    body = {"name": f"agent-world-{args.count}", "generator": {"world_config": wc.to_json(),
                                                               "seeds": [args.first_seed, args.first_seed + args.count]},
            "tasks": [t.to_json() for t in tasks]}
    Path(args.out).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(tasks)} certified tasks to {args.out}")


if __name__ == "__main__":
    main()
