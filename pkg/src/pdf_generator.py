from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.platypus import (
    SimpleDocTemplate,
    Paragraph,
    Spacer,
    Table,
    TableStyle,
)
from reportlab.lib import colors
from sqlalchemy.orm import Session
from database import get_run
from errors import AsmError
from loguru import logger

MAX_LOSS_ROWS = 50


def sample_losses(losses, max_rows: int = MAX_LOSS_ROWS):
    """Evenly spaced (iteration, loss) rows, always keeping the first and last."""
    if len(losses) <= max_rows:
        return list(losses)
    step = (len(losses) - 1) / (max_rows - 1)
    picked = sorted({round(k * step) for k in range(max_rows)})
    return [losses[i] for i in picked]


def _format(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def generate_run_report_pdf(session: Session, run_id: int, pdf_path) -> None:
    """
    Generates a Run Report PDF for the given run_id.

    The PDF includes:
      - A title and the run metadata table (command, status, loss, metric, timing).
      - A loss curve table sampled to at most 50 rows.

    Args:
        session (Session): The active SQLAlchemy session.
        run_id (int): The ID of the run.
        pdf_path: The file path where the PDF will be saved.
    """
    run_data = get_run(session, run_id)
    if not run_data:
        raise AsmError(f"run with ID {run_id} not found")

    pdf_filename = str(pdf_path)
    doc = SimpleDocTemplate(pdf_filename, pagesize=A4)
    styles = getSampleStyleSheet()

    title_style = ParagraphStyle(
        "TitleStyle",
        parent=styles["Title"],
        fontSize=18,
        alignment=1,
        textColor=colors.darkblue,
        spaceAfter=16,
    )
    subtitle_style = ParagraphStyle(
        "SubtitleStyle",
        parent=styles["Heading2"],
        fontSize=14,
        alignment=1,
        textColor=colors.black,
        spaceAfter=12,
    )
    table_style = TableStyle(
        [
            ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
            ("TEXTCOLOR", (0, 0), (-1, 0), colors.black),
            ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
            ("ALIGN", (0, 0), (-1, -1), "LEFT"),
            ("GRID", (0, 0), (-1, -1), 0.5, colors.grey),
            ("PADDING", (0, 0), (-1, -1), 6),
        ]
    )

    elements = [Paragraph(f"Run Report #{run_id}", title_style), Spacer(1, 10)]

    metadata_rows = [["Field", "Value"]]
    for key in (
        "date", "command", "seed", "status", "final_loss", "metric_name",
        "metric", "iterations", "wall_time", "artifact",
    ):
        metadata_rows.append([key.replace("_", " ").title() + ":", _format(run_data.get(key))])
    metadata_table = Table(metadata_rows, colWidths=[120, 330])
    metadata_table.setStyle(table_style)
    elements.append(metadata_table)
    elements.append(Spacer(1, 20))

    losses = run_data.get("losses", [])
    elements.append(Paragraph("Loss History", subtitle_style))
    if losses:
        rows = [["Iteration", "Loss"]] + [[str(i), f"{loss:.8g}"] for i, loss in sample_losses(losses)]
        loss_table = Table(rows, colWidths=[120, 200])
        loss_table.setStyle(table_style)
        elements.append(loss_table)
    else:
        elements.append(Paragraph("No optimizer iterations were recorded for this run.", styles["Normal"]))

    doc.build(elements)
    logger.info(f"Run Report PDF generated: {pdf_filename}")
