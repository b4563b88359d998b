import csv
import json
import logging
import os

logger = logging.getLogger(__name__)

DECIMALS = 6

TABLES = {
    "trajectories": ("frame", "agent", "x", "y"),
    "errors": ("frame", "agent", "error"),
    "global": ("frame", "E"),
    "events": ("type", "node", "term", "frame"),
    "final": ("agent", "x", "y"),
}
JSON_FILE = "run.json"


class OutputExistsError(FileExistsError):
    """Output file already present and overwriting was not forced."""


def fmt(value):
    """Fixed 6-decimal text, locale independent, no negative zero."""
    text = f"{value:.{DECIMALS}f}"
    if text.lstrip("-").strip("0.") == "":
        text = text.lstrip("-")
    return text


def record_tables(record):
    """
    The five export tables of a run record.

    Returns:
        dict table name -> list of rows; floats stay floats, formatting happens
        in the writers
    """
    trajectories = [
        (frame, agent, pos.x, pos.y)
        for frame, positions in enumerate(record.trajectories)
        for agent, pos in sorted(positions.items())
    ]
    errors = [
        (frame, agent, value)
        for frame, per_agent in enumerate(record.per_agent_error)
        for agent, value in sorted(per_agent.items())
    ]
    energy = [(frame, value) for frame, value in enumerate(record.global_error)]
    events = [e.as_row() for e in record.events]
    final = [(agent, pos.x, pos.y) for agent, pos in sorted(record.final_positions.items())]
    return {"trajectories": trajectories, "errors": errors, "global": energy, "events": events, "final": final}


def _cell(value):
    return fmt(value) if isinstance(value, float) else str(value)


def _number(value):
    # JSON carries exactly the value the CSV text spells
    return float(fmt(value)) if isinstance(value, float) else value


def _claim(path, force):
    if os.path.exists(path) and not force:
        raise OutputExistsError(f"{path} exists (use --force to overwrite)")
    return path


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([_cell(v) for v in row] for row in rows)


def write_json(path, record, tables):
    document = {
        "scenario": record.label,
        "seed": record.seed,
        "tables": {
            name: {"columns": list(TABLES[name]), "rows": [[_number(v) for v in row] for row in rows]}
            for name, rows in tables.items()
        },
    }
    with open(path, "w", newline="", encoding="utf-8") as f:
        json.dump(document, f, indent=1)
        f.write("\n")


def write_outputs(record, config):
    """
    Export a run record into config.out_dir.

    Args:
        record: RunRecord
        config: CliConfig (out_dir, format, plot, force)

    Returns:
        list of written file paths

    Raises:
        OutputExistsError: a target exists and config.force is off
        OSError: the directory cannot be created or written
    """
    os.makedirs(config.out_dir, exist_ok=True)
    tables = record_tables(record)

    if config.format == "json":
        targets = {JSON_FILE: os.path.join(config.out_dir, JSON_FILE)}
    else:
        targets = {name: os.path.join(config.out_dir, f"{name}.csv") for name in TABLES}
    plot_targets = {}
    if config.plot:
        from Lib.Lib_Plot import PLOT_FILES
        plot_targets = {name: os.path.join(config.out_dir, name) for name in PLOT_FILES}

    for path in list(targets.values()) + list(plot_targets.values()):
        _claim(path, config.force)

    written = []
    if config.format == "json":
        write_json(targets[JSON_FILE], record, tables)
        written.append(targets[JSON_FILE])
    else:
        for name, header in TABLES.items():
            write_csv(targets[name], header, tables[name])
            written.append(targets[name])

    if config.plot:
        from Lib.Lib_Plot import write_plots
        written.extend(write_plots(record, config.out_dir))

    for path in written:
        logger.info("Wrote %s", path)
    return written
