use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use svsd_core::data::CoreDataset;
use svsd_core::inference::{
    core_curves, hull_grid, idw_covariates, krige_theta, parameter_map, predict_profile, select_draws,
    stage_comparison, summarize_columns, summarize_physical, waic_archive, PredictTarget, Summary, WaicReport,
};
use svsd_core::io::{
    fmt_f64, load_archive, load_checkpoint, load_covariates, load_dataset, save_archive, save_checkpoint,
    save_dataset, save_json, save_table, Provenance, RunConfig,
};
use svsd_core::likelihood::ModelContext;
use svsd_core::model::{SiteCovariates, N_THETA, THETA_NAMES};
use svsd_core::sampler::{ChainArchive, Sampler};
use svsd_core::simulate::simulate_dataset;
use svsd_core::spatial::{distance_matrix, fit_semivariogram, LatLon};
use svsd_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "svsd", version, about = "Spatially varying snow-density inference")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SVSD_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Cores table; overrides the configuration.
    #[arg(long)]
    cores: Option<PathBuf>,
    /// Site covariates table; overrides the configuration.
    #[arg(long)]
    covariates: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset and its generating parameters.
    Simulate,
    /// Run the sampler and write the draw archive.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Write a checkpoint every this many sweeps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// WAIC of an archive.
    Waic {
        /// Archive directory; defaults to the output directory.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Posterior predictions at a core, a location or over a grid.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Observed core to predict for.
        #[arg(long, conflicts_with = "at")]
        core: Option<String>,
        /// New location as `lat,lon`.
        #[arg(long, value_parser = parse_latlon)]
        at: Option<LatLon>,
        #[arg(long, requires = "at")]
        temperature: Option<f64>,
        #[arg(long, requires = "at")]
        smb: Option<f64>,
        /// Expedition label setting the error scale at a new location.
        #[arg(long, requires = "at")]
        expedition: Option<String>,
    },
    /// Posterior summaries of the archive.
    Summarize {
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Semivariograms of posterior-mean site parameters.
    Semivariogram {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Fit a sweep of model variants and rank them by WAIC.
    Compare {
        #[command(flatten)]
        data: DataArgs,
    },
}

fn parse_latlon(s: &str) -> std::result::Result<LatLon, String> {
    let (a, b) = s.split_once(',').ok_or("expected lat,lon")?;
    let lat: f64 = a.trim().parse().map_err(|_| format!("bad latitude {a:?}"))?;
    let lon: f64 = b.trim().parse().map_err(|_| format!("bad longitude {b:?}"))?;
    if lat.abs() > 90.0 || lon.abs() > 360.0 {
        return Err("coordinates out of range".into());
    }
    Ok(LatLon::new(lat, lon))
}

struct Env {
    cfg: RunConfig,
    cfg_text: String,
    seed: u64,
    out: PathBuf,
}

impl Env {
    fn prov(&self, command: &str) -> Provenance {
        Provenance::new(command, &self.cfg_text, self.seed)
    }

    fn data(&self, args: &DataArgs) -> Result<CoreDataset> {
        let cores = args.cores.clone().or_else(|| self.cfg.data.cores.clone());
        let cov = args.covariates.clone().or_else(|| self.cfg.data.covariates.clone());
        match (cores, cov) {
            (Some(c), Some(v)) => load_dataset(&c, &v),
            _ => Err(Error::Config(
                "no input data: pass --cores and --covariates or set [data] in the configuration".into(),
            )),
        }
    }

    fn archive(&self, dir: &Option<PathBuf>) -> Result<ChainArchive> {
        load_archive(dir.as_deref().unwrap_or(&self.out))
    }

    fn context(&self, args: &DataArgs) -> Result<ModelContext> {
        ModelContext::new(self.data(args)?, self.cfg.model.clone())
    }
}

fn summary_cells(s: &Summary) -> Vec<String> {
    [s.mean, s.sd, s.q05, s.q25, s.median, s.q75, s.q95]
        .iter()
        .map(|v| fmt_f64(*v))
        .collect()
}

const SUMMARY_COLUMNS: [&str; 8] = ["name", "mean", "sd", "q05", "q25", "median", "q75", "q95"];

fn fit_archive(env: &Env, ctx: ModelContext, checkpoint_every: Option<usize>, resume: Option<&Path>) -> Result<ChainArchive> {
    let mut chain = env.cfg.chain.clone();
    chain.seed = env.seed;
    let mut sampler = match resume {
        Some(p) => Sampler::from_checkpoint(ctx, load_checkpoint(p)?)?,
        None => Sampler::new(ctx, chain, None)?,
    };
    match checkpoint_every {
        Some(k) if k > 0 => {
            while !sampler.is_done() {
                sampler.run_for(k)?;
                save_checkpoint(&sampler.checkpoint(), &env.out.join("checkpoint.json"))?;
            }
        }
        _ => {
            while !sampler.is_done() {
                sampler.step()?;
            }
        }
    }
    Ok(sampler.finish())
}

fn waic_text(r: &WaicReport) -> String {
    let mut s = format!(
        "WAIC\t{}\nWAIC SE\t{}\np_waic\t{}\nlppd\t{}\nobservations\t{}\n",
        fmt_f64(r.waic),
        fmt_f64(r.se),
        fmt_f64(r.p_waic),
        fmt_f64(r.lppd),
        r.elpd_pointwise.len()
    );
    for w in &r.warnings {
        s.push_str(&format!("warning\t{w}\n"));
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let (cfg, cfg_text) = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), String::new()),
    };
    let seed = cli.global.seed.or(cfg.seed).unwrap_or(cfg.chain.seed);
    std::fs::create_dir_all(&cli.global.out_dir)?;
    let env = Env {
        cfg,
        cfg_text,
        seed,
        out: cli.global.out_dir.clone(),
    };
    match cli.command {
        Command::Simulate => {
            let sim = simulate_dataset(&env.cfg.simulation, &env.cfg.model, env.seed)?;
            let prov = env.prov("simulate");
            save_dataset(&sim.data, &env.out.join("cores.tsv"), &env.out.join("covariates.tsv"), Some(&prov))?;
            save_json(&sim.truth, &env.out.join("truth.json"))?;
            println!(
                "simulated {} cores at {} sites ({} measurements) into {}",
                sim.data.n_cores(),
                sim.data.n_sites(),
                sim.data.n_obs(),
                env.out.display()
            );
        }
        Command::Fit {
            data,
            checkpoint_every,
            resume,
        } => {
            let ctx = env.context(&data)?;
            let archive = fit_archive(&env, ctx, checkpoint_every, resume.as_deref())?;
            save_archive(&archive, &env.out, Some(&env.prov("fit")))?;
            for a in &archive.acceptance {
                println!("acceptance\t{}\t{:.3}\t[{:.3}, {:.3}]", a.block, a.mean, a.min, a.max);
            }
            println!("wrote {} draws to {}", archive.n_draws(), env.out.display());
        }
        Command::Waic { archive } => {
            let r = waic_archive(&env.archive(&archive)?)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            let text = waic_text(&r);
            std::fs::write(env.out.join("waic.txt"), format!("{}{}", env.prov("waic").header_lines(), text))?;
            print!("{text}");
        }
        Command::Summarize { archive } => {
            let a = env.archive(&archive)?;
            let prov = env.prov("summarize");
            let phys = summarize_physical(&a, &env.cfg.model.constants)?;
            let rows: Vec<Vec<String>> = phys
                .iter()
                .map(|p| {
                    let mut r = vec![p.summary.name.clone()];
                    r.extend(summary_cells(&p.summary));
                    r.push(p.reference.map_or(String::new(), fmt_f64));
                    r.push(p.reference_quantile.map_or(String::new(), fmt_f64));
                    r
                })
                .collect();
            let mut cols = SUMMARY_COLUMNS.to_vec();
            cols.extend(["reference", "reference_quantile"]);
            save_table(&env.out.join("summary_physical.tsv"), "# svsd-summary v1", &cols, &rows, Some(&prov))?;
            let all: Vec<Vec<String>> = summarize_columns(&a)?
                .iter()
                .map(|s| {
                    let mut r = vec![s.name.clone()];
                    r.extend(summary_cells(s));
                    r
                })
                .collect();
            save_table(&env.out.join("summary_all.tsv"), "# svsd-summary v1", &SUMMARY_COLUMNS, &all, Some(&prov))?;
            println!("{}", cols.join("\t"));
            for r in &rows {
                println!("{}", r.join("\t"));
            }
        }
        Command::Predict {
            data,
            archive,
            core,
            at,
            temperature,
            smb,
            expedition,
        } => predict(&env, &data, &archive, core, at, temperature, smb, expedition)?,
        Command::Semivariogram { data, archive, bins } => {
            let a = env.archive(&archive)?;
            let ctx = env.context(&data)?;
            let n = ctx.data.n_sites();
            if a.layout.n_sites != n {
                return Err(Error::Validation("archive and data have different site counts".into()));
            }
            let mut rows = Vec::new();
            let mut fits = Vec::new();
            for p in 0..N_THETA {
                let means: Vec<f64> = (0..n)
                    .map(|s| (0..a.n_draws()).map(|d| a.theta(d, s).0[p]).sum::<f64>() / a.n_draws() as f64)
                    .collect();
                match fit_semivariogram(&means, &ctx.data.sites.dist, bins) {
                    Ok(f) => {
                        for ((h, g), c) in f.bin_centers.iter().zip(&f.semivariance).zip(&f.counts) {
                            rows.push(vec![THETA_NAMES[p].into(), fmt_f64(*h), fmt_f64(*g), c.to_string(), fmt_f64(f.model(*h))]);
                        }
                        fits.push(vec![
                            THETA_NAMES[p].into(),
                            fmt_f64(f.nugget),
                            fmt_f64(f.partial_sill),
                            fmt_f64(f.range),
                            fmt_f64(f.effective_range()),
                        ]);
                    }
                    Err(e) => eprintln!("warning: {}: {e}", THETA_NAMES[p]),
                }
            }
            let prov = env.prov("semivariogram");
            save_table(
                &env.out.join("semivariogram_bins.tsv"),
                "# svsd-semivariogram v1",
                &["parameter", "lag_km", "semivariance", "pairs", "fitted"],
                &rows,
                Some(&prov),
            )?;
            let cols = ["parameter", "nugget", "partial_sill", "range_km", "effective_range_km"];
            save_table(&env.out.join("semivariogram_fit.tsv"), "# svsd-semivariogram v1", &cols, &fits, Some(&prov))?;
            println!("{}", cols.join("\t"));
            for r in &fits {
                println!("{}", r.join("\t"));
            }
        }
        Command::Compare { data } => {
            let dataset = env.data(&data)?;
            let variants = env.cfg.compare.resolved();
            let mut results = Vec::new();
            for v in &variants {
                let spec = v.apply(&env.cfg.model);
                let ctx = ModelContext::new(dataset.clone(), spec)?;
                let archive = fit_archive(&env, ctx, None, None)?;
                let r = waic_archive(&archive)?;
                eprintln!("{}: WAIC {:.2} (SE {:.2})", v.name, r.waic, r.se);
                results.push((v.name.clone(), r));
            }
            let best = results.iter().map(|r| r.1.waic).fold(f64::INFINITY, f64::min);
            let mut order: Vec<usize> = (0..results.len()).collect();
            order.sort_by(|&a, &b| results[a].1.waic.total_cmp(&results[b].1.waic));
            let rows: Vec<Vec<String>> = order
                .iter()
                .enumerate()
                .map(|(rank, &i)| {
                    let (name, r) = &results[i];
                    vec![
                        (rank + 1).to_string(),
                        name.clone(),
                        format!("{:.2}", r.waic),
                        format!("{:.2}", r.waic - best),
                        format!("{:.2}", r.se),
                        format!("{:.2}", r.p_waic),
                    ]
                })
                .collect();
            let cols = ["rank", "model", "waic", "relative_waic", "waic_se", "p_waic"];
            save_table(&env.out.join("compare.tsv"), "# svsd-compare v1", &cols, &rows, Some(&env.prov("compare")))?;
            println!("{}", cols.join("\t"));
            for r in &rows {
                println!("{}", r.join("\t"));
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict(
    env: &Env,
    data: &DataArgs,
    archive: &Option<PathBuf>,
    core: Option<String>,
    at: Option<LatLon>,
    temperature: Option<f64>,
    smb: Option<f64>,
    expedition: Option<String>,
) -> Result<()> {
    let a = env.archive(archive)?;
    let ctx = env.context(data)?;
    let pc = &env.cfg.predict;
    let draws = select_draws(a.n_draws(), pc.max_draws);
    let prov = env.prov("predict");
    let qcols = ["q05", "q25", "q50", "q75", "q95"];
    let qcells = |s: &Summary| -> Vec<String> { [s.q05, s.q25, s.median, s.q75, s.q95].iter().map(|v| fmt_f64(*v)).collect() };
    if let Some(id) = core {
        let c = ctx
            .data
            .cores
            .iter()
            .position(|r| r.core_id == id)
            .ok_or_else(|| Error::Validation(format!("unknown core {id:?}")))?;
        let depths = pc.depths();
        let curves = core_curves(&a, &ctx, c, &depths, &draws)?;
        let mut rows = Vec::new();
        for (label, curve) in [("hierarchical", &curves.hierarchical), ("site", &curves.site), ("smoothed", &curves.smoothed)] {
            for (x, s) in depths.iter().zip(curve) {
                let mut r = vec![label.to_string(), fmt_f64(*x)];
                r.extend(qcells(s));
                rows.push(r);
            }
        }
        let mut cols = vec!["curve", "depth"];
        cols.extend(qcols);
        save_table(&env.out.join("core_curves.tsv"), "# svsd-profile v1", &cols, &rows, Some(&prov))?;
        let p = predict_profile(&a, &ctx, &PredictTarget::Core(c), &depths, &draws, pc.new_site_smoothing, env.seed)?;
        write_profile(env, &p, &prov)?;
        println!("wrote core_curves.tsv and profile.tsv for core {id}");
        return Ok(());
    }
    let sites: Vec<LatLon> = ctx.data.sites.locations.clone();
    let site_covs: Vec<SiteCovariates> = ctx.data.cores_of_site.iter().map(|cs| ctx.data.cores[cs[0]].covariates).collect();
    if let Some(loc) = at {
        let covariates = match (temperature, smb) {
            (Some(t), Some(s)) => SiteCovariates::new(t, s)?,
            (None, None) => idw_covariates(&sites, &site_covs, &[loc], pc.idw_power)?[0],
            _ => return Err(Error::Config("give both --temperature and --smb or neither".into())),
        };
        let m = match expedition {
            Some(label) => ctx
                .data
                .expeditions
                .iter()
                .position(|e| *e == label)
                .ok_or_else(|| Error::Validation(format!("unknown expedition {label:?}")))?,
            None => 0,
        };
        let target = PredictTarget::Location {
            location: loc,
            covariates,
            expedition: m,
            dx: None,
        };
        let p = predict_profile(&a, &ctx, &target, &pc.depths(), &draws, pc.new_site_smoothing, env.seed)?;
        write_profile(env, &p, &prov)?;
        println!("wrote profile.tsv for ({}, {})", loc.lat, loc.lon);
        return Ok(());
    }
    let grid = hull_grid(&sites, pc.grid_points)?;
    let covs = match &pc.grid_covariates {
        Some(path) => {
            let table = load_covariates(path)?;
            let locs: Vec<LatLon> = table.iter().map(|r| r.0).collect();
            idw_covariates(&locs, &table.iter().map(|r| r.1).collect::<Vec<_>>(), &grid, pc.idw_power)?
        }
        None => idw_covariates(&sites, &site_covs, &grid, pc.idw_power)?,
    };
    let dist = distance_matrix(&grid, &sites);
    let kriged = krige_theta(&a, &ctx.data.sites, &dist, &draws, env.seed)?;
    let map = parameter_map(&grid, &covs, &kriged, &ctx.spec.constants);
    let rows: Vec<Vec<String>> = map
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.lon),
                fmt_f64(r.lat),
                r.quantity.clone(),
                fmt_f64(r.q05),
                fmt_f64(r.q25),
                fmt_f64(r.q50),
                fmt_f64(r.q75),
                fmt_f64(r.q95),
            ]
        })
        .collect();
    let mut cols = vec!["lon", "lat", "quantity"];
    cols.extend(qcols);
    save_table(&env.out.join("map.tsv"), "# svsd-map v1", &cols, &rows, Some(&prov))?;
    let stages = stage_comparison(&kriged, &covs, &ctx.spec.constants)?;
    let rows: Vec<Vec<String>> = grid
        .iter()
        .zip(&stages)
        .map(|(g, s)| {
            let mut r = vec![fmt_f64(g.lon), fmt_f64(g.lat)];
            r.extend(s.p.iter().map(|v| fmt_f64(*v)));
            r.extend(s.se.iter().map(|v| fmt_f64(*v)));
            r
        })
        .collect();
    save_table(
        &env.out.join("stage_probabilities.tsv"),
        "# svsd-map v1",
        &["lon", "lat", "p_k2_gt_k3", "p_k2_gt_k4", "p_k3_gt_k4", "se_k2_gt_k3", "se_k2_gt_k4", "se_k3_gt_k4"],
        &rows,
        Some(&prov),
    )?;
    println!("wrote map.tsv and stage_probabilities.tsv over {} grid points", grid.len());
    Ok(())
}

fn write_profile(env: &Env, p: &svsd_core::inference::PredictiveDraws, prov: &Provenance) -> Result<()> {
    let mut rows = Vec::new();
    for (j, x) in p.depths.iter().enumerate() {
        let mu: Vec<f64> = p.mu.iter().map(|r| r[j]).collect();
        let y: Vec<f64> = p.y.iter().map(|r| r[j]).collect();
        for (label, v) in [("mu", mu), ("y", y)] {
            let s = Summary::of(label, &v);
            rows.push(vec![
                label.to_string(),
                fmt_f64(*x),
                fmt_f64(s.q05),
                fmt_f64(s.q25),
                fmt_f64(s.median),
                fmt_f64(s.q75),
                fmt_f64(s.q95),
            ]);
        }
    }
    save_table(
        &env.out.join("profile.tsv"),
        "# svsd-profile v1",
        &["quantity", "depth", "q05", "q25", "q50", "q75", "q95"],
        &rows,
        Some(prov),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
