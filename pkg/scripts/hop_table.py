"""Round trips of the user_rights point select per placement category (CSV on stdout)."""

import sys

from slsm.bench import hopaudit

if __name__ == "__main__":
    strategies = sys.argv[1].split(",") if len(sys.argv) > 1 else hopaudit.AUDIT_STRATEGIES
    sys.stdout.write(hopaudit.format_table(hopaudit.hop_table(strategies)))
