"""Small grid over distillation hyperparameters on the flagship task.

Prints the median first@tau speedup (3 seeds) for each setting; the harness
defaults were picked from this output.
"""

import itertools
import statistics

from weak2strong.harness import ExperimentConfig, load_datasets, obtain_teacher, make_estimator, _fit
from weak2strong.metrics import CrossingRule, first_at_tau


def main():
    config = ExperimentConfig.from_dict({"task": "classification", "seeds": [0, 1, 2]})
    train, val = load_datasets(config)
    teacher, _ = obtain_teacher(config, "/tmp/w2s-sweep", train, val)
    bases = {s: _fit(make_estimator(config, s, None), train, val) for s in config.seeds}
    grid = itertools.product([1.0, 2.0, 4.0], [1.0, 2.0, 6.0], [(5.0, 10.0), (12.0, 20.0)])
    for gamma, t_start, (hold, decay) in grid:
        speedups = []
        for s in config.seeds:
            ours = _fit(make_estimator(config, s, teacher, gamma=gamma, t_start=t_start,
                                       hold_end=hold, decay_end=decay), train, val)
            rule = CrossingRule(ours.teacher_metric_, 1)
            b, o = first_at_tau(bases[s].metric_series_, rule), first_at_tau(ours.metric_series_, rule)
            speedups.append(b / o if b and o else float("nan"))
        print(f"gamma={gamma:<4} t_start={t_start:<4} hold/decay={hold:g}/{decay:g}  "
              f"median speedup {statistics.median(speedups):.2f}  {[round(x, 2) for x in speedups]}")


if __name__ == "__main__":
    main()
