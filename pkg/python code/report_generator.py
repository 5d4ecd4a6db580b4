# -*- coding: utf-8 -*-

# report_generator.py

from datetime import datetime
import logging
import os

logger = logging.getLogger(__name__)

DASHBOARD_PAGES = [
    "rd_psnr.html",
    "rd_ms_ssim.html",
    "rd_perceptual_proxy.html",
    "bd_rate.html",
    "bit_allocation.html",
    "frequency_profile.html",
    "timing.html",
    "training.html",
]

PROXY_NOTE = (
    "The perceptual column is a fixed random-feature distance, not LPIPS. "
    "It ranks codecs consistently but its absolute values are not comparable with published LPIPS numbers."
)


def create_report_folder(base="reports"):
    """Create the folder holding generated reports"""
    report_directory = os.path.join(os.getcwd(), base) if not os.path.isabs(base) else base
    if not os.path.exists(report_directory):
        os.makedirs(report_directory)
    return report_directory


def _table_html(frame, float_format="{:.4f}"):
    if frame is None or len(frame) == 0:
        return "<p class=\"empty\">No data.</p>"
    return frame.to_html(index=False, classes="data", float_format=float_format.format, na_rep="-")


def generate_html_report(name, tables=None, figures=None, report_directory=None):
    """
    Generate the evaluation report

    Args:
        name (str): Report name (file stem)
        tables (dict, optional): Section title -> pd.DataFrame
        figures (list, optional): (png path, title) pairs, in report order
        report_directory (str, optional): Output folder; defaults to ./reports

    Returns:
        str: Path to the generated HTML file
    """
    report_directory = report_directory or create_report_folder()
    os.makedirs(report_directory, exist_ok=True)
    output_path = os.path.join(report_directory, f"{name}.html")
    figures = figures or []

    missing_images = [img for img, _ in figures if not os.path.exists(img)]
    if missing_images:
        logger.warning("missing figures, left out of the report: %s", ", ".join(missing_images))

    sections = []
    for title, frame in (tables or {}).items():
        note = f"<p class=\"note\">{PROXY_NOTE}</p>" if "perceptual_proxy" in getattr(frame, "columns", []) else ""
        sections.append(f"<div class=\"section\"><h2>{title}</h2>{note}{_table_html(frame)}</div>")
    for img, title in figures:
        if img in missing_images:
            continue
        relative = os.path.relpath(img, start=report_directory)
        sections.append(f"<div class=\"section\"><h2>{title}</h2><img src=\"{relative}\" alt=\"{title}\"></div>")

    current_date = datetime.now().strftime("%d %B %Y")
    body = "\n".join(sections)
    html_content = f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>Compression report - {name}</title>
    <style>
        body {{
            font-family: 'Segoe UI', Arial, sans-serif;
            color: #2c3e50;
            background-color: #f8f9fa;
            padding: 20px;
        }}
        .container {{
            max-width: 1200px;
            margin: 0 auto;
            background: white;
            border-radius: 12px;
            box-shadow: 0 4px 6px rgba(0,0,0,0.1);
            overflow: hidden;
        }}
        .header {{
            background: linear-gradient(135deg, #3498db, #2c3e50);
            color: white;
            padding: 30px;
            text-align: center;
        }}
        .section {{ padding: 20px 30px; border-bottom: 1px solid #eee; }}
        .section img {{ max-width: 100%; }}
        table.data {{ border-collapse: collapse; width: 100%; }}
        table.data th, table.data td {{ border: 1px solid #ddd; padding: 6px 10px; text-align: right; }}
        table.data th {{ background: #ecf0f1; }}
        .note {{ font-style: italic; color: #7f8c8d; }}
    </style>
</head>
<body>
    <div class="container">
        <div class="header">
            <h1>Compression report: {name}</h1>
            <p>Generated on {current_date}</p>
        </div>
        {body}
    </div>
</body>
</html>
"""
    with open(output_path, "w", encoding="utf-8") as file:
        file.write(html_content)
    logger.info("report written to %s", output_path)
    return output_path


def create_dashboard(html_directory="html"):
    """Single page embedding every interactive figure present in html_directory"""
    os.makedirs(html_directory, exist_ok=True)
    frames = "\n".join(
        f"        <iframe src=\"{page}\"></iframe>"
        for page in DASHBOARD_PAGES
        if os.path.exists(os.path.join(html_directory, page))
    )
    html_content = f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>Compression dashboard</title>
    <style>
        body {{ font-family: Arial, sans-serif; margin: 20px; }}
        iframe {{ width: 100%; height: 520px; border: none; margin-bottom: 20px; }}
        h1 {{ text-align: center; color: #333; }}
    </style>
</head>
<body>
    <h1>Compression dashboard</h1>
{frames}
</body>
</html>
"""
    dashboard_path = os.path.join(html_directory, "dashboard.html")
    with open(dashboard_path, "w", encoding="utf-8") as file:
        file.write(html_content)
    return dashboard_path
