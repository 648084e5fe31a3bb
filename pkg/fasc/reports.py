#
#   FASC Toolkit - Report Writer
#
import csv
import json
import logging
import math
import os.path


def _clean(value):
    """ JSON has no NaN/Inf; write them as null """
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {_k: _clean(_v) for _k, _v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(_v) for _v in value]
    return value


class ReportWriter(object):
    """
    Report Writer Class

    Writes JSON and CSV reports into an output directory. Output is
    deterministic: sorted JSON keys, fixed CSV column order.
    """

    def __init__(self, out_dir="."):
        self.out_dir = out_dir
        self.written = []

    def _path(self, filename):
        os.makedirs(self.out_dir, exist_ok=True)
        return os.path.join(self.out_dir, filename)

    def write_json(self, filename, data):
        _filepath = self._path(filename)
        try:
            with open(_filepath, "w") as _f:
                json.dump(_clean(data), _f, indent=2, sort_keys=True)
                _f.write("\n")
        except OSError as e:
            logging.error(f"Report Writer - Could not write {_filepath}: {str(e)}")
            raise

        logging.info(f"Report Writer - Wrote {_filepath}")
        self.written.append(_filepath)
        return _filepath

    def write_csv(self, filename, rows, fieldnames):
        _filepath = self._path(filename)
        try:
            with open(_filepath, "w", newline="") as _f:
                fc = csv.DictWriter(_f, fieldnames=fieldnames)
                fc.writeheader()
                fc.writerows([{_k: ("" if _row.get(_k) is None else _row.get(_k)) for _k in fieldnames} for _row in rows])
        except OSError as e:
            logging.error(f"Report Writer - Could not write {_filepath}: {str(e)}")
            raise

        logging.info(f"Report Writer - Wrote {_filepath}")
        self.written.append(_filepath)
        return _filepath
