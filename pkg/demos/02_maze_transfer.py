"""End-to-end transfer on the U-maze: unicycle target, point-mass sim.

Runs the full pipeline for the grounded method -- collect target data,
pair it against the abstract simulator, train the grounding model, align
a target-side encoder, train PPO inside the grounded simulator -- then
deploys the policy on the unicycle and reports its success rate.  Direct
transfer (policy trained in the raw abstract simulator) is run with the
same budget for contrast.

Takes a few minutes on a laptop.  Run:  python demos/02_maze_transfer.py
"""
from pathlib import Path

from astra_lab import data, evaluation
from astra_lab.envs import make_pair

pair = make_pair("unicycle_umaze")

print("collecting 60 unicycle episodes ...")
dataset = data.collect(pair, n_traj=60, seed=0)
dataset.assign_split()
data.make_paired(dataset, pair)

pc = evaluation.PipelineConfig()
out = Path("runs/demo_maze")
for method in ("dt", "astra"):
    print(f"running the {method} pipeline (train + deploy) ...")
    report = evaluation.run_method(method, pair, dataset, seed=0,
                                   out_dir=out / method, pc=pc)
    print(f"  {method}: success {report.success_rate:.2f} "
          f"[{report.ci_low:.2f}, {report.ci_high:.2f}]  "
          f"mean length {report.mean_length:.0f}")
print(f"artifacts (checkpoints, curves, reports) under {out}/")
