use std::fmt::Write as _;

use ccvc::config::ExperimentConfig;

use crate::run::{
    io_failure, load_data, out_root, prepare_run_dir, run_training, DatasetDescriptor, RunManifest,
};
use crate::{ConfigArgs, Failure, OutArgs};

/// One rung of the ladder: which components are on.
struct Rung {
    name: &'static str,
    con: bool,
    dis: bool,
    map: bool,
    cpl: bool,
    aug: bool,
}

const LADDER: [Rung; 6] = [
    Rung {
        name: "sup",
        con: false,
        dis: false,
        map: false,
        cpl: false,
        aug: false,
    },
    Rung {
        name: "ccr",
        con: true,
        dis: false,
        map: false,
        cpl: false,
        aug: false,
    },
    Rung {
        name: "dis",
        con: true,
        dis: true,
        map: false,
        cpl: false,
        aug: false,
    },
    Rung {
        name: "map",
        con: true,
        dis: true,
        map: true,
        cpl: false,
        aug: false,
    },
    Rung {
        name: "cpl",
        con: true,
        dis: true,
        map: true,
        cpl: true,
        aug: false,
    },
    Rung {
        name: "aug",
        con: true,
        dis: true,
        map: true,
        cpl: true,
        aug: true,
    },
];

fn rung_config(base: &ExperimentConfig, r: &Rung) -> ExperimentConfig {
    let mut cfg = base.clone();
    if !r.con {
        cfg.lambda2 = 0.0;
    }
    cfg.use_dis = r.dis;
    cfg.use_map = r.map;
    cfg.use_cpl = r.cpl;
    cfg.use_strong_aug = r.aug;
    cfg
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "."
    }
}

pub fn ablate(args: &ConfigArgs, out: &OutArgs) -> Result<(), Failure> {
    let base = crate::run::build_config(args, None)?;
    let dir = out
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("ablate-seed{}", base.seed)));
    prepare_run_dir(&dir, out.force)?;
    let data = load_data(&base)?;
    RunManifest::new(&base, DatasetDescriptor::of(&base, &data), &dir).write(&dir)?;

    let mut table =
        String::from("row\tname\tcon\tdis\tmap\tcpl\taug\tval_miou\tmean_cosine\tconfident_frac\n");
    for (i, r) in LADDER.iter().enumerate() {
        let cfg = rung_config(&base, r);
        let row_dir = dir.join(format!("row-{}-{}", i + 1, r.name));
        prepare_run_dir(&row_dir, true)?;
        let state = run_training(&cfg, &data, &row_dir, None, &format!("[{}] ", r.name))?;
        let (miou, cos, frac) = state
            .epoch_log
            .last()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |e| {
                (e.val_miou, e.mean_feature_cosine, e.confident_frac)
            });
        let line = format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            i + 1,
            r.name,
            mark(r.con),
            mark(r.dis),
            mark(r.map),
            mark(r.cpl),
            mark(r.aug),
            miou,
            cos,
            frac
        );
        let _ = writeln!(table, "{line}");
    }
    let path = dir.join("ablation.tsv");
    std::fs::write(&path, &table).map_err(|e| io_failure(&path, e))?;
    print!("{table}");
    Ok(())
}
