# database.py
import sqlite3

import pandas as pd

from coactseg.config import DATABASE_PATH
from coactseg.metrics import REPORT_COLUMNS, MetricsReport
from coactseg.utils import logger


def create_database(db_path=DATABASE_PATH):
    """Create the SQLite results database and required tables if they don't exist"""
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()

    # One row per cli invocation that produced metrics
    cursor.execute('''
    CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY,
        name TEXT NOT NULL,
        command TEXT NOT NULL,
        seed INTEGER,
        config TEXT,
        created TIMESTAMP DEFAULT CURRENT_TIMESTAMP
    )
    ''')

    # Per-case, per-head metric rows; NULL marks a not-applicable value
    cursor.execute('''
    CREATE TABLE IF NOT EXISTS case_metrics (
        id INTEGER PRIMARY KEY,
        run_id INTEGER NOT NULL,
        case_id TEXT NOT NULL,
        kind TEXT NOT NULL,
        head TEXT NOT NULL,
        target TEXT NOT NULL,
        dice REAL,
        jaccard REAL,
        hd95 REAL,
        asd REAL,
        f1 REAL,
        head_gap REAL,
        FOREIGN KEY (run_id) REFERENCES runs (id),
        UNIQUE(run_id, case_id, head, target)
    )
    ''')

    conn.commit()
    conn.close()
    logger.debug(f"Results database ready at {db_path}")


def save_run(name, command, seed, config_text, db_path=DATABASE_PATH):
    """Register a run and return its id"""
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()
    cursor.execute('''
    INSERT INTO runs (name, command, seed, config)
    VALUES (?, ?, ?, ?)
    ''', (name, command, int(seed), config_text))
    conn.commit()
    run_id = cursor.lastrowid
    conn.close()
    return run_id


def save_case_metrics(run_id, rows, db_path=DATABASE_PATH):
    """Save the per-case rows of a MetricsReport (or its DataFrame) under a run"""
    frame = rows.rows if isinstance(rows, MetricsReport) else rows
    frame = frame.astype(object).where(pd.notna(frame), None)

    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()
    for _, row in frame.iterrows():
        cursor.execute('''
        INSERT OR REPLACE INTO case_metrics
        (run_id, case_id, kind, head, target, dice, jaccard, hd95, asd, f1, head_gap)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (int(run_id), *(row[c] for c in REPORT_COLUMNS)))
    conn.commit()
    conn.close()
    return len(frame)


def get_runs(db_path=DATABASE_PATH):
    """Get all runs, newest first"""
    conn = sqlite3.connect(db_path)
    df = pd.read_sql_query("SELECT * FROM runs ORDER BY id DESC", conn)
    conn.close()
    return df


def _latest_run_id(conn):
    latest = pd.read_sql_query("SELECT MAX(id) AS id FROM runs", conn)['id'].iloc[0]
    return None if pd.isna(latest) else int(latest)


def get_run_seed(run_id=None, db_path=DATABASE_PATH):
    """Root seed a run was stored with (the latest run when run_id is None); None if unknown"""
    conn = sqlite3.connect(db_path)
    if run_id is None:
        run_id = _latest_run_id(conn)
    row = conn.execute("SELECT seed FROM runs WHERE id = ?", (int(run_id),)).fetchone() if run_id is not None else None
    conn.close()
    return None if row is None or row[0] is None else int(row[0])


def get_case_metrics(run_id=None, db_path=DATABASE_PATH):
    """Get the metric rows of a run (the latest run when run_id is None)"""
    conn = sqlite3.connect(db_path)

    if run_id is None:
        run_id = _latest_run_id(conn)
        if run_id is None:
            conn.close()
            return pd.DataFrame(columns=REPORT_COLUMNS)

    query = f"SELECT {', '.join(REPORT_COLUMNS)} FROM case_metrics WHERE run_id = ? ORDER BY id"
    df = pd.read_sql_query(query, conn, params=[int(run_id)])
    conn.close()
    return df


def export_metrics_to_excel(output_path, run_id=None, db_path=DATABASE_PATH):
    """Export the per-case rows and the aggregate table of a run to Excel"""
    df = get_case_metrics(run_id, db_path)
    logger.info(f"Found {len(df)} metric rows in database.")

    if df.empty:
        logger.warning("No metric rows in database to export.")
        return False

    report = MetricsReport(df)
    with pd.ExcelWriter(output_path, engine='openpyxl') as writer:
        report.rows.to_excel(writer, sheet_name='cases', index=False)
        report.aggregate().to_excel(writer, sheet_name='summary', index=False)
    logger.info(f"Metrics exported to {output_path}")
    return True
