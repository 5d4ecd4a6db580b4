# -*- coding: utf-8 -*-

# graphics.py

import os
import threading

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from mapping import metric_mapping
from utils import create_directories

# Create global lock for graph generation
graph_generation_lock = threading.Lock()


def _save(fig, output_html, output_png):
    create_directories(*(os.path.dirname(path) for path in (output_html, output_png) if path))
    if output_html:
        fig.write_html(output_html)
    if output_png:
        fig.write_image(output_png)
    return fig


def plot_rd_curves(records, metric="psnr", output_html="html/rd_psnr.html", output_png="png/rd_psnr.png"):
    """
    Rate-distortion curves of every codec for one metric.

    Args:
        records (pd.DataFrame): RD records (codec, metric, bpp, quality)
        metric (str): Metric to plot
    """
    with graph_generation_lock:
        df = records[records["metric"] == metric].sort_values(["codec", "bpp"])
        if df.empty:
            raise ValueError(f"no RD records for metric '{metric}'")

        fig = px.line(
            df,
            x="bpp",
            y="quality",
            color="codec",
            markers=True,
            title=f"Rate-distortion: {metric_mapping[metric]['label']}",
            labels={"bpp": "Bits per pixel", "quality": metric_mapping[metric]["label"], "codec": "Codec"},
        )
        fig.update_layout(width=900, height=500)
        return _save(fig, output_html, output_png)


def plot_bd_rates(table, output_html="html/bd_rate.html", output_png="png/bd_rate.png"):
    """
    Grouped bar chart of BD-rates against the anchor, one group per metric.
    """
    with graph_generation_lock:
        df = table.dropna(subset=["bd_rate"])
        anchor = df["anchor"].iloc[0] if len(df) else "anchor"
        fig = px.bar(
            df,
            x="codec",
            y="bd_rate",
            color="metric",
            barmode="group",
            title=f"BD-rate against {anchor} (lower is better)",
            labels={"bd_rate": "BD-rate (%)", "codec": "Codec", "metric": "Metric"},
        )
        fig.add_hline(y=0.0, line_dash="dash", line_color="grey")
        return _save(fig, output_html, output_png)


def plot_bit_allocation(bits, title="Estimated bits per latent position", output_html="html/bit_allocation.html", output_png="png/bit_allocation.png"):
    """
    Heatmap of a bit-allocation map [H_y, W_y].
    """
    with graph_generation_lock:
        fig = px.imshow(
            np.asarray(bits),
            color_continuous_scale="Viridis",
            title=title,
            labels={"color": "bits"},
        )
        fig.update_layout(width=600, height=550)
        return _save(fig, output_html, output_png)


def plot_frequency_profile(profile, output_html="html/frequency_profile.html", output_png="png/frequency_profile.png"):
    """
    High- and low-band energy share of the z0 estimate across timesteps.
    """
    with graph_generation_lock:
        df = profile.melt(id_vars="t", value_vars=["high", "low"], var_name="band", value_name="fraction")
        fig = px.line(
            df,
            x="t",
            y="fraction",
            color="band",
            markers=True,
            title="Spectral energy of the z0 estimate by timestep",
            labels={"t": "Timestep", "fraction": "Energy fraction", "band": "Band"},
        )
        fig.update_yaxes(range=[0, 1])
        return _save(fig, output_html, output_png)


def plot_timing(timing, output_html="html/timing.html", output_png="png/timing.png"):
    """
    Median wall-clock per path, annotated with the denoiser call count.
    """
    with graph_generation_lock:
        fig = go.Figure(
            go.Bar(
                x=timing["path"],
                y=timing["median_seconds"],
                text=[f"{calls} denoiser calls" for calls in timing["denoiser_calls"]],
                textposition="outside",
                marker_color="teal",
            )
        )
        fig.update_layout(title="Median time per image", yaxis_title="Seconds", xaxis_title="Path")
        return _save(fig, output_html, output_png)


def plot_training_curves(metrics, terms, output_html="html/training.html", output_png="png/training.png"):
    """
    Loss terms against the step, one line per term.

    Args:
        metrics (list[dict] or pd.DataFrame): Parsed metrics log
        terms (list[str]): Columns to draw
    """
    with graph_generation_lock:
        df = pd.DataFrame(metrics)
        present = [term for term in terms if term in df.columns]
        long = df.melt(id_vars=["step", "stage"], value_vars=present, var_name="term", value_name="value")
        fig = px.line(
            long,
            x="step",
            y="value",
            color="term",
            facet_row="stage",
            log_y=True,
            title="Training loss terms",
        )
        return _save(fig, output_html, output_png)
