#!/usr/bin/env python3
"""
Script to analyze and plot training run logs and benchmark results.
"""

import json
import os
from typing import Dict, List, Optional

import numpy as np


def load_log_file(filepath: str) -> Dict:
    """Load a single run log or bench file."""
    with open(filepath, 'r') as f:
        return json.load(f)


def find_run_logs(run_directory: str) -> List[str]:
    """Every run_log.json below run_directory, sorted by path."""
    found = []
    for root, _, files in os.walk(run_directory):
        if 'run_log.json' in files:
            found.append(os.path.join(root, 'run_log.json'))
    return sorted(found)


def epoch_losses(data: Dict) -> List[float]:
    """Per-token loss per epoch, recomputed from the step entries when the metadata lacks it."""
    losses = data['metadata'].get('epoch_losses')
    if losses:
        return losses
    by_epoch: Dict[int, List[float]] = {}
    for entry in data['data']:
        by_epoch.setdefault(entry['epoch'], [0.0, 0])
        by_epoch[entry['epoch']][0] += entry['loss'] * entry['tokens']
        by_epoch[entry['epoch']][1] += entry['tokens']
    return [total / count for total, count in (by_epoch[e] for e in sorted(by_epoch))]


def analyze_run_log(filepath: str) -> Dict:
    """Print statistics for one run log and return them."""
    data = load_log_file(filepath)
    metadata = data['metadata']
    steps = data['data']
    losses = epoch_losses(data)

    print(f"\n{'='*60}")
    print(f"Run log: {filepath}")
    print(f"{'='*60}")
    print(f"Epochs: {metadata['epochs']}")
    print(f"Total steps: {metadata['total_steps']}")
    print(f"Start time: {metadata['start_time']}")
    print(f"End time: {metadata['end_time']}")
    print(f"Wall time: {metadata.get('wall_seconds', 0.0):.1f} seconds")
    print(f"Context pairs: {metadata.get('context_pairs')} ({metadata.get('strategy')})")

    stats = {}
    if losses:
        step_losses = np.array([s['loss'] for s in steps])
        stats = {
            'first_epoch_loss': losses[0],
            'final_epoch_loss': losses[-1],
            'best_epoch': int(np.argmin(losses)) + 1,
            'step_loss_std': float(step_losses.std()) if len(step_losses) else 0.0,
        }
        print(f"\nLoss:")
        print(f"  - First epoch: {losses[0]:.4f}")
        print(f"  - Final epoch: {losses[-1]:.4f}")
        print(f"  - Best epoch: {stats['best_epoch']} ({min(losses):.4f})")
        print(f"  - Step loss std: {stats['step_loss_std']:.4f}")
    return stats


def plot_loss_curves(filepaths: List[str], output: str) -> None:
    """One per-epoch loss curve per run on a log y axis."""
    import matplotlib

    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(1, 1, figsize=(7, 4))
    for filepath in filepaths:
        losses = epoch_losses(load_log_file(filepath))
        ax.plot(range(1, len(losses) + 1), losses, marker='.', label=os.path.basename(os.path.dirname(filepath)))
    ax.set_yscale('log')
    ax.set_xlabel('epoch')
    ax.set_ylabel('per-token loss')
    ax.grid(True, alpha=0.3)
    ax.legend()
    plt.tight_layout()
    fig.savefig(output, dpi=120)
    plt.close(fig)
    print(f"\nLoss curves saved to {output}")


def analyze_bench(filepath: str) -> Dict[str, float]:
    """Print benchmark medians and the fitted log-log slope per kind."""
    data = load_log_file(filepath)
    print(f"\n{'='*60}")
    print(f"Benchmark: {filepath}")
    print(f"{'='*60}")
    slopes = {}
    for kind in data['metadata']['kinds']:
        rows = sorted((r for r in data['data'] if r['kind'] == kind), key=lambda r: r['length'])
        lengths = np.array([r['length'] for r in rows], dtype=float)
        seconds = np.array([r['seconds'] for r in rows])
        if len(rows) >= 2:
            slopes[kind] = float(np.polyfit(np.log2(lengths), np.log2(seconds), 1)[0])
        print(f"{kind.capitalize()}:")
        for r in rows:
            print(f"    - L={r['length']:>6}: {r['seconds'] * 1e3:9.3f} ms, {r['flops'] / 1e9:.4f} GFLOPs")
        if kind in slopes:
            print(f"    - log-log slope: {slopes[kind]:.2f}")
    return slopes


def analyze_all_runs(run_directory: str = "runs", plot: Optional[str] = None):
    """Analyze every run log found under run_directory."""
    if not os.path.exists(run_directory):
        print(f"Run directory '{run_directory}' does not exist.")
        return

    log_files = find_run_logs(run_directory)
    if not log_files:
        print(f"No run logs found in '{run_directory}'.")
        return

    print(f"\nFound {len(log_files)} run log(s) in '{run_directory}'")
    finals = []
    for filepath in log_files:
        stats = analyze_run_log(filepath)
        if stats:
            finals.append(stats['final_epoch_loss'])

    print(f"\n{'='*60}")
    print(f"SUMMARY")
    print(f"{'='*60}")
    print(f"Total runs: {len(log_files)}")
    if finals:
        print(f"Final loss: mean {np.mean(finals):.4f}, min {np.min(finals):.4f}, max {np.max(finals):.4f}")
    if plot:
        plot_loss_curves(log_files, plot)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description='Analyze training run logs and benchmark results')
    parser.add_argument('--file', type=str, help='Analyze a specific run log')
    parser.add_argument('--bench', type=str, help='Analyze a bench.json file')
    parser.add_argument('--dir', type=str, default='runs', help='Run directory (default: runs)')
    parser.add_argument('--plot', type=str, help='Save loss curves to this PNG')

    args = parser.parse_args()

    if args.file:
        analyze_run_log(args.file)
        if args.plot:
            plot_loss_curves([args.file], args.plot)
    elif args.bench:
        analyze_bench(args.bench)
    else:
        analyze_all_runs(args.dir, args.plot)
