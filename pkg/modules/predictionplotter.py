import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt


class PredictionPlotter:
    """
    PDF export of predicted vs original close prices and of correlation curves.
    """

    def __init__(self, outdir, name='run'):
        """
        outdir: Directory the pdf images are saved into, created if missing.
        name: Prefix of the file names.
        """
        self.outdir = outdir
        self.name = name
        if not os.path.isdir(self.outdir):
            os.makedirs(self.outdir)

    def plot_predictions(self, frame, target, trend=None):
        """
        Predicted and original close prices over the same interval.

        frame: prediction DataFrame indexed by date (predicted_close, actual_close)
        target: ticker name, used in title and file name
        trend: optional DataFrame with predicted_trend / actual_trend columns
        """
        fig, ax = plt.subplots(figsize=(10, 5))
        ax.plot(frame.index, frame['actual_close'], color='black', label='original close')
        ax.plot(frame.index, frame['predicted_close'], color='red', alpha=0.8, label='predicted close')
        if trend is not None:
            ax.plot(trend.index, trend['actual_trend'], color='grey', linestyle='--', label='original trend')
            ax.plot(trend.index, trend['predicted_trend'], color='orange', linestyle='--', label='predicted trend')
        ax.set_title(f"{target}: test range")
        ax.set_xlabel("Date")
        ax.set_ylabel("Close")
        ax.legend()
        fig.autofmt_xdate()
        fig.tight_layout()
        path = os.path.join(self.outdir, f"{self.name}_predictions_{target}.pdf")
        fig.savefig(path, metadata={'CreationDate': None})
        plt.close(fig)
        return path

    def plot_correlation(self, report):
        """
        Lag curves of every partner against the base ticker.

        report: CorrelationReport
        """
        fig, ax = plt.subplots(figsize=(8, 5))
        for curve in report.curves:
            label = 'autocorrelation' if curve.other == curve.base else curve.other
            ax.plot(curve.lags, curve.values, marker='.', label=label)
        ax.axvline(0, color='grey', linewidth=0.5)
        ax.set_title(f"Correlation against {report.base} ({report.representation})")
        ax.set_xlabel("Lag [trading days]")
        ax.set_ylabel("rho")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(self.outdir, f"{self.name}_correlation_{report.base}.pdf")
        fig.savefig(path, metadata={'CreationDate': None})
        plt.close(fig)
        return path
