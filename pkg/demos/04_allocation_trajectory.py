"""
Where the memory goes, phase by phase
=====================================

Per-class memory for old classes (exemplars) and new classes (loaded
training data) under a static split and under an adaptive schedule that
starts old-heavy and grows further.
"""

from rmm.env import EnvConfig, FixedController, ScheduleController, run_episode, trajectory_records
from rmm.taskgen import benchmark_task

task = benchmark_task()

controllers = {
    "fixed 0.25": FixedController(0.25),
    "schedule": ScheduleController([0.7, 0.1, 0, 0, 0], [0.6] * 5),
}

# %%
# The static split keeps the old share constant, so exemplars per old class
# shrink as classes accumulate while every new class gets a large slice. The
# schedule narrows that gap.
for name, ctrl in controllers.items():
    traj = run_episode(task, ctrl, EnvConfig(), (0, 99))
    print(name)
    for r in trajectory_records(traj, name)[1:]:
        print(f"  phase {r['phase']}: old/class {r['old_per_class']:6.1f}  "
              f"new/class {r['new_per_class']:6.1f}  accuracy {100 * r['reward']:.1f}")
    print(f"  average accuracy {100 * sum(traj.rewards) / len(traj.rewards):.2f}")
