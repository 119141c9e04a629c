"""The two-PM worked example: one 4-core move takes the fragment rate from 0.5 to 0."""
from vmresched.baselines import ha_reschedule
from vmresched.bench import format_timeline, timeline_rows
from vmresched.datasets import two_pm_example
from vmresched.exact import MipInstance, solve_exact
from vmresched.simulator import rollout_plan

state = two_pm_example()
print("initial FR", rollout_plan(state, []).objective)
for name, plan in (("ha", ha_reschedule(state, 1)), ("exact", solve_exact(MipInstance(state, 1)).plan)):
    res = rollout_plan(state, plan)
    print(f"{name}: final FR {res.objective}, rewards {[str(r) for r in res.rewards]}")
print(format_timeline(timeline_rows(state, ha_reschedule(state, 1))))
