"""Setting 1: nonlinear time trend, variable cluster sizes, configurations (a)-(d)."""

from _common import run_and_report, study_parser

if __name__ == "__main__":
    args = study_parser(__doc__, "abcd").parse_args()
    run_and_report(1, args)
