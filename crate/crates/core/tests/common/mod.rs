#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use nodediffrec::stream_rng;

/// Three taste clusters over 48 items, written as `user item rating` lines.
pub fn write_synthetic_log(path: &Path, users: usize, seed: u64) {
    let mut rng = stream_rng(seed, 99);
    let mut text = String::from("# user item rating\n");
    for u in 0..users {
        let c = u % 3;
        for i in 0..48 {
            let p = if i / 16 == c { 0.45 } else { 0.04 };
            if rng.random::<f64>() < p {
                let _ = writeln!(text, "u{u}\ti{i}\t{}", 1 + (u + i) % 5);
            }
        }
    }
    fs::write(path, text).unwrap();
}

/// A config that runs the whole pipeline on the synthetic log in seconds.
pub fn tiny_config_text(data: &Path) -> String {
    format!(
        "profile = desk
run.name = tiny
run.seeds = 0,1
run.ablations = none,no_gg,no_sd,full
rec.algos = als,svd
data.path = {}
data.drop_to = 0
embed.dim = 8
embed.epochs = 3
inj.hidden = 16
inj.joint = 16
inj.dz = 8
inj.decoder_hidden = 16
inj.feature_split = 8
inj.map_split = 8
inj.epochs = 20
injdiff.T = 20
injdiff.hidden = 16
injdiff.blocks = 1
injdiff.time_dim = 4
injdiff.class_dim = 2
injdiff.epochs = 5
enrich.n_new = 12
enrich.tau = -2.0
enrich.budget = 40
pref.latent = 8
pref.hidden = 16
pref.epochs = 3
latdiff.T = 20
latdiff.hidden = 16
latdiff.blocks = 1
latdiff.time_dim = 4
latdiff.epochs = 3
denoise.t_start = 5
als.factors = 4
svd.rank = 4
metrics.cutoffs = 5,10
",
        data.display()
    )
}

/// Writes the synthetic log and the tiny config into `dir`; returns the
/// config path.
pub fn tiny_setup(dir: &Path) -> PathBuf {
    let log = dir.join("synthetic.tsv");
    write_synthetic_log(&log, 60, 5);
    let cfg = dir.join("tiny.conf");
    fs::write(&cfg, tiny_config_text(&log)).unwrap();
    cfg
}
