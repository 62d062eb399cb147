"""End-to-end experiments: template, victim, attack, profile, train, eval

Every stage writes its results to the output directory and reads the
results of the previous stages from there, so that stages can be run
one at a time.
"""
import contextlib
import json
import logging
import pathlib

from .archive import LeakArchive
from .bitprofile import BitProfile
from .dram import TemplateMap, generate_template, template_statistics
from .leak import LeakLedger, RecoveryCurve, Strategy, run_attack
from .recovery_fit import fit_recovery, rounds_to_target
from .subtrain import (RangeTensors, TinyNet, evaluate, make_task, subset,
                       to_victim, train_substitute)
from .victim import VictimModel
from ._version import version as __version__


logger = logging.getLogger(__name__)

#: header of the metrics CSV
METRICS_HEADER = "arm,rounds,strategy,accuracy,fidelity,acc_under_attack,seed"

#: file names in the output directory
FILES = {"template": "template.txt",
         "victim": "victim.qmdl",
         "archive": "leak_archive.h5",
         "metrics": "metrics.csv",
         "summary": "summary.txt",
         "report": "report.json",
         "config": "config.txt",
         }

#: stages of a complete run in execution order
STAGES = ["template", "victim", "attack", "profile", "train", "eval"]


class StageError(BaseException):
    """Raised when an experiment stage fails"""

    def __init__(self, stage, config_hash, cause=None):
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause
        msg = "Stage '{}' failed (config {})".format(stage, config_hash)
        if cause is not None:
            msg += ": {}: {}".format(cause.__class__.__name__, cause)
        super(StageError, self).__init__(msg)


def arm_name(strategy, rounds):
    """Name of a leaked-weights arm"""
    return "{}_{}".format(Strategy(strategy).value, rounds)


class ExperimentReport(object):
    def __init__(self, config, curves=None, metrics=None, template_info=None):
        """Recovery curves, metrics table and provenance of a run

        Parameters
        ----------
        config: bitleak.config.ExperimentConfig
        curves: dict
            :class:`bitleak.leak.RecoveryCurve` per strategy value
        metrics: list of dict
            One row per arm (keys of :const:`METRICS_HEADER`)
        template_info: dict
            see :func:`bitleak.dram.template_statistics`
        """
        self.config = config
        self.curves = curves or {}
        self.metrics = metrics or []
        self.template_info = template_info or {}

    def arm(self, name, rounds=None, strategy=None):
        """Metrics row of an arm"""
        for row in self.metrics:
            if row["arm"] == name \
                    and (rounds is None or row["rounds"] == rounds) \
                    and (strategy is None or row["strategy"] == strategy):
                return row
        raise KeyError("No arm '{}' in report!".format(name))

    def provenance(self):
        cfg = self.config
        return {"config hash": cfg.hash(),
                "seed": cfg["seed"],
                "sub seeds": {stage: cfg.sub_seed(stage) for stage in
                              ["template", "task", "victim", "subset",
                               "train"]},
                "bitleak version": __version__,
                }

    def curve_summary(self):
        summary = {}
        for name, curve in sorted(self.curves.items()):
            info = {"rounds": len(curve),
                    "final msb": _round(curve.msb[-1]) if len(curve) else 0.0,
                    "final full": (_round(curve.column("full")[-1])
                                   if len(curve) else 0.0),
                    "rounds to 90% msb": curve.rounds_to(0.9),
                    "seconds": _round(curve.seconds[-1]) if len(curve)
                    else 0.0,
                    }
            if len(curve) >= 2:
                fit = fit_recovery(curve.rounds, curve.msb)
                est = rounds_to_target(fit, 0.9)
                info["fit"] = {"amplitude": _round(fit.amplitude),
                               "tau": _round(fit.tau),
                               "rounds to 90% msb": (None if est is None
                                                     else _round(est))}
            summary[name] = info
        msb = Strategy.MSB_PRIORITY.value
        allbits = Strategy.ALL_BITS.value
        if msb in self.curves and allbits in self.curves \
                and len(self.curves[msb]) and len(self.curves[allbits]):
            budget = min(self.curves[msb].seconds[-1],
                         self.curves[allbits].seconds[-1])
            at_msb = self.curves[msb].msb_at_seconds(budget)
            at_all = self.curves[allbits].msb_at_seconds(budget)
            summary["equal time"] = {"seconds": _round(budget),
                                     "msb": _round(at_msb),
                                     "allbits": _round(at_all),
                                     "msb dominates": bool(at_msb >= at_all),
                                     }
        return summary

    def to_dict(self):
        info = dict(self.template_info)
        if "page fraction ci" in info:
            info["page fraction ci"] = [_round(v) for v in
                                        info["page fraction ci"]]
        for key in ["page fraction", "cell rate"]:
            if key in info:
                info[key] = _round(info[key], 9)
        return {"provenance": self.provenance(),
                "template": info,
                "curves": self.curve_summary(),
                "metrics": self.metrics,
                }

    def write_json(self, path):
        pathlib.Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def write_metrics(self, path):
        lines = [METRICS_HEADER]
        for row in self.metrics:
            lines.append("{},{},{},{:.4f},{:.4f},{:.4f},{}".format(
                row["arm"], row["rounds"], row["strategy"], row["accuracy"],
                row["fidelity"], row["acc_under_attack"], row["seed"]))
        pathlib.Path(path).write_text("\n".join(lines) + "\n")

    def summary_text(self):
        """Plain-text table of the metrics"""
        head = "{:<10} {:>7} {:>9} {:>9} {:>9} {:>9}".format(
            "arm", "rounds", "strategy", "accuracy", "fidelity", "attacked")
        lines = ["config {}  seed {}".format(self.config.hash(),
                                            self.config["seed"]),
                 "", head, "-" * len(head)]
        for row in self.metrics:
            lines.append("{:<10} {:>7} {:>9} {:>9.2f} {:>9.2f} {:>9.2f}"
                         .format(row["arm"], row["rounds"], row["strategy"],
                                 row["accuracy"], row["fidelity"],
                                 row["acc_under_attack"]))
        summary = self.curve_summary()
        if summary:
            lines += ["", "recovery"]
            for name, info in sorted(summary.items()):
                if name == "equal time":
                    lines.append("  MSB at equal time ({:.0f} s): msb {:.3f}, "
                                 "allbits {:.3f}".format(info["seconds"],
                                                         info["msb"],
                                                         info["allbits"]))
                else:
                    lines.append("  {:<8} {} rounds, msb {:.3f}, full {:.3f}"
                                 .format(name, info["rounds"],
                                         info["final msb"],
                                         info["final full"]))
        return "\n".join(lines) + "\n"


def _round(value, digits=6):
    return round(float(value), digits)


class Experiment(object):
    def __init__(self, config, out_dir=None):
        """Stage runner of an experiment

        Parameters
        ----------
        config: bitleak.config.ExperimentConfig
        out_dir: str, pathlib.Path or None
            Output directory (defaults to the "output directory" key)
        """
        self.config = config
        if out_dir is None:
            out_dir = config["output directory"]
        self.out = pathlib.Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._template = None
        self._victim = None
        self._task = None

    def path(self, key):
        return self.out / FILES[key]

    @contextlib.contextmanager
    def stage(self, name):
        """Wrap any fault of a stage into a :class:`StageError`"""
        logger.info("stage %s (config %s)", name, self.config.hash())
        try:
            yield
        except StageError:
            raise
        except (KeyboardInterrupt, SystemExit):
            raise
        except BaseException as e:
            raise StageError(name, self.config.hash(), e) from e

    def archive(self):
        return LeakArchive(self.path("archive"), h5mode="a")

    @property
    def strategies(self):
        return self.config.strategies

    @property
    def task(self):
        if self._task is None:
            cfg = self.config
            dims = cfg["victim dims"]
            self._task = make_task(n_features=dims[0],
                                   n_classes=dims[-1],
                                   n_train=cfg["train samples"],
                                   n_test=cfg["test samples"],
                                   blobs_per_class=cfg["blobs per class"],
                                   cluster_std=cfg["cluster std"],
                                   seed=cfg.sub_seed("task"))
        return self._task

    @property
    def template(self):
        if self._template is None:
            self._template = TemplateMap.load(self.path("template"))
        return self._template

    @property
    def victim(self):
        if self._victim is None:
            self._victim = VictimModel.load(self.path("victim"),
                                            **self.config.layout())
        return self._victim

    def attacker_data(self):
        task = self.task
        return subset(task.x_train, task.y_train,
                      self.config["subset fraction"],
                      seed=self.config.sub_seed("subset"))

    def run_template(self):
        cfg = self.config
        with self.stage("template"):
            self._template = generate_template(
                cfg.geometry(),
                frac_vuln_pages=cfg["frac vuln pages"],
                mean_cells_per_vuln_page=cfg["cells per vuln page"],
                seed=cfg.sub_seed("template"))
            self._template.save(self.path("template"))
            cfg.save(self.path("config"))
        return self._template

    def run_victim(self):
        cfg = self.config
        with self.stage("victim"):
            dims = cfg["victim dims"]
            shapes = list(zip(dims[:-1], dims[1:]))
            task = self.task
            net = train_substitute(dims, RangeTensors.unleaked(shapes),
                                   task.x_train, task.y_train,
                                   cfg.victim_train_config())
            self._victim = to_victim(net, seed=cfg.sub_seed("victim"),
                                     **cfg.layout())
            self._victim.save(self.path("victim"))
            with self.archive() as arc:
                arc.set_victim(self._victim)
            logger.info("victim %s", self._victim)
        return self._victim

    def run_attack(self):
        """Attack with every strategy at the largest round budget

        Smaller budgets are served from the ledger snapshots.
        """
        cfg = self.config
        results = {}
        with self.stage("attack"):
            for strategy in self.strategies:
                ledger, curve = run_attack(cfg.attack_config(strategy),
                                           self.template, self.victim)
                name = strategy.value
                curve.to_csv(self.out / "curve_{}.csv".format(name))
                ledger.dump(self.out / "ledger_{}.txt".format(name))
                with self.archive() as arc:
                    arc.set_ledger(name, ledger)
                    arc.set_curve(name, curve)
                results[name] = (ledger, curve)
        return results

    def load_ledger(self, strategy):
        return LeakLedger.load(
            self.out / "ledger_{}.txt".format(Strategy(strategy).value),
            self.victim.layer_shapes)

    def load_curve(self, strategy):
        return RecoveryCurve.from_csv(
            self.out / "curve_{}.csv".format(Strategy(strategy).value))

    def max_prefix(self, strategy):
        if self.config["msb only"] \
                and Strategy(strategy) == Strategy.MSB_PRIORITY:
            return 1
        return 8

    def run_profile(self):
        profiles = {}
        with self.stage("profile"):
            scales = self.victim.scales
            for strategy in self.strategies:
                ledger = self.load_ledger(strategy)
                for rounds in self.config["rounds"]:
                    name = arm_name(strategy, rounds)
                    profile = BitProfile.from_ledger(
                        ledger.at_round(rounds), scales,
                        max_prefix=self.max_prefix(strategy))
                    profile.to_csv(self.out / "profile_{}.csv".format(name))
                    with self.archive() as arc:
                        arc.set_profile(name, profile)
                    profiles[name] = profile
        return profiles

    def load_profile(self, name):
        return BitProfile.from_csv(self.out / "profile_{}.csv".format(name),
                                   self.victim.layer_shapes,
                                   self.victim.scales)

    def run_train(self):
        """Train the baseline arm and every leaked-weights arm"""
        cfg = self.config
        nets = {}
        with self.stage("train"):
            x_sub, y_sub = self.attacker_data()
            dims = self.victim.dims
            arms = [("baseline", RangeTensors.unleaked(
                self.victim.layer_shapes))]
            for strategy in self.strategies:
                for rounds in cfg["rounds"]:
                    name = arm_name(strategy, rounds)
                    arms.append((name, RangeTensors.from_profile(
                        self.load_profile(name))))
            for name, ranges in arms:
                logger.info("training arm %s", name)
                net = train_substitute(dims, ranges, x_sub, y_sub,
                                       cfg.train_config())
                with self.archive() as arc:
                    arc.set_substitute(name, net.weight_arrays(),
                                       net.bias_arrays())
                nets[name] = net
        return nets

    def load_substitute(self, name):
        with self.archive() as arc:
            weights, biases = arc.get_substitute(name)
        net = TinyNet(self.victim.dims)
        net.set_parameters(weights, biases)
        return net

    def run_eval(self):
        cfg = self.config
        with self.stage("eval"):
            task = self.task
            pgd = cfg.pgd_config()
            victim_net = TinyNet.from_victim(self.victim)
            arms = [("baseline", 0, "-", "baseline")]
            for strategy in self.strategies:
                for rounds in cfg["rounds"]:
                    arms.append(("leaked", rounds, strategy.value,
                                 arm_name(strategy, rounds)))
            rows = []
            for arm, rounds, strategy, name in arms:
                metrics = evaluate(victim_net, self.load_substitute(name),
                                   task.x_test, task.y_test, pgd)
                rows.append(_metrics_row(arm, rounds, strategy, metrics,
                                         cfg["seed"]))
            # the victim attacks itself
            metrics = evaluate(victim_net, victim_net, task.x_test,
                               task.y_test, pgd)
            rows.append(_metrics_row("whitebox", "-", "-", metrics,
                                     cfg["seed"]))
            curves = {s.value: self.load_curve(s) for s in self.strategies}
            report = ExperimentReport(
                cfg, curves=curves, metrics=rows,
                template_info=template_statistics(self.template))
            report.write_metrics(self.path("metrics"))
            report.write_json(self.path("report"))
            self.path("summary").write_text(report.summary_text())
        return report

    def run(self):
        """Run all stages"""
        self.run_template()
        self.run_victim()
        self.run_attack()
        self.run_profile()
        self.run_train()
        return self.run_eval()


def _metrics_row(arm, rounds, strategy, metrics, seed):
    return {"arm": arm,
            "rounds": rounds,
            "strategy": strategy,
            "accuracy": _round(metrics.accuracy, 4),
            "fidelity": _round(metrics.fidelity, 4),
            "acc_under_attack": _round(metrics.acc_under_attack, 4),
            "seed": seed,
            }


def run_experiment(config, out_dir=None):
    """Run a complete experiment and return its report"""
    return Experiment(config, out_dir=out_dir).run()

