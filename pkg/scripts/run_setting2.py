"""Setting 2: trend only in clusters with baseline size above 15, configurations (e)-(h)."""

from _common import run_and_report, study_parser

if __name__ == "__main__":
    args = study_parser(__doc__, "efgh").parse_args()
    run_and_report(2, args)
