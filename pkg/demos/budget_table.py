"""Print the trainable-parameter table at desk scale and at full T5-base shapes.

At desk scale every closed-form row that has a live counterpart is checked
against the model's own count.  At full scale only the formulas are evaluated.
"""

from pathlib import Path

from hyperpelt import budget
from hyperpelt.config import C1, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def show(title, config, introspect=None):
    print(f"== {title}")
    rows = budget.compare_methods(config, introspect=introspect)
    print(budget.format_table(rows))
    ok, fractions = budget.per_task_ordering(config)
    print("hyperprefix < hyperpelt < prefix:", ok)
    print()


if __name__ == "__main__":
    show("desk config", C1, budget.introspect_small(C1))
    show("T5-base shapes", load_config(CONFIGS / "t5_base.cfg")[0])
