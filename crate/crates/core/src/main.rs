use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use posedist::distribution::Approximation;
use posedist::harness::commands::{
    self, load_scene_list, parse_recursions, DEFAULT_MIN_ALPHA, DEFAULT_VIZ_RECURSION,
};
use posedist::harness::config::DEFAULT_RECURSION;
use posedist::harness::SceneConfig;
use posedist::{Error, Result};

/// Pose distributions from keypoint heatmaps.
#[derive(Debug, Parser)]
#[command(name = "posedist", version)]
struct Cli {
    /// Scene config (JSON); for `score`, a scene list.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Rotation grid recursion, overriding the config.
    #[arg(long, global = true)]
    recursion: Option<u32>,
    /// Likelihood approximation, overriding the config.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Approximation>,
    /// Noise seed, overriding the config. For `score`, scene i uses seed + i.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the rotation grid as CSV.
    Grid,
    /// Render synthetic heatmaps and a matching scene config.
    Synth,
    /// Evaluate the rotation distribution of a scene.
    Eval {
        /// Also write every pose mass as a binary file.
        #[arg(long)]
        save_pose_distribution: bool,
    },
    /// Score one scene at several grid recursions.
    Sweep {
        /// Comma-separated recursion levels in 0..=5.
        #[arg(long, default_value = "0,1,2,3,4")]
        recursions: String,
    },
    /// Mollweide plot of a rotation distribution.
    Viz {
        /// Rotation distribution CSV written by `eval`; computed from the
        /// config when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Skip rotations below this fraction of the peak mass.
        #[arg(long, default_value_t = DEFAULT_MIN_ALPHA)]
        min_alpha: f64,
    },
    /// Time the grid evaluation.
    Bench {
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// Mean log likelihood over a list of scenes.
    Score,
}

fn parse_mode(s: &str) -> std::result::Result<Approximation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Cli {
    fn config_path(&self) -> Result<&Path> {
        self.config
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--config is required".into()))
    }

    fn apply_overrides(&self, config: &mut SceneConfig) {
        if let Some(s) = self.recursion {
            config.recursion = s;
        }
        if let Some(m) = self.mode {
            config.mode = m;
        }
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
    }

    fn scene(&self) -> Result<SceneConfig> {
        let mut config = SceneConfig::load(self.config_path()?)?;
        self.apply_overrides(&mut config);
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Grid => {
            let s = match (cli.recursion, &cli.config) {
                (Some(s), _) => s,
                (None, Some(_)) => cli.scene()?.recursion,
                (None, None) => DEFAULT_RECURSION,
            };
            let path = commands::cmd_grid(s, &cli.out)?;
            println!("wrote {}", path.display());
        }
        Command::Synth => {
            let manifest = commands::cmd_synth(&cli.scene()?, &cli.out)?;
            println!(
                "wrote {} heatmaps of {}x{} to {}",
                manifest.keypoints,
                manifest.resolution,
                manifest.resolution,
                cli.out.display()
            );
        }
        Command::Eval {
            save_pose_distribution,
        } => {
            let eval = commands::cmd_eval(&cli.scene()?, &cli.out, *save_pose_distribution)?;
            let s = &eval.summary;
            println!("recursion         {}", s.recursion);
            println!("poses evaluated   {}", s.evaluations);
            println!(
                "gt log likelihood {:.4} (bound {:.4})",
                s.gt_log_likelihood, s.upper_bound
            );
            println!("entropy           {:.4}", s.entropy);
            println!("argmax error      {:.4} rad", s.argmax.error);
            println!("time              {:.3} s", eval.elapsed.as_secs_f64());
        }
        Command::Sweep { recursions } => {
            let recursions = parse_recursions(recursions)?;
            let rows = commands::cmd_sweep(&cli.scene()?, &recursions, &cli.out)?;
            println!("recursion,grid_size,evaluations,gt_log_likelihood,upper_bound,seconds");
            for r in rows {
                println!(
                    "{},{},{},{:.4},{:.4},{:.3}",
                    r.recursion,
                    r.grid_size,
                    r.evaluations,
                    r.gt_log_likelihood,
                    r.upper_bound,
                    r.elapsed.as_secs_f64()
                );
            }
        }
        Command::Viz { input, min_alpha } => {
            let config = cli.config.as_ref().map(|_| cli.scene()).transpose()?;
            let recursion = cli.recursion.unwrap_or(DEFAULT_VIZ_RECURSION);
            let summary = commands::cmd_viz(
                config.as_ref(),
                input.as_deref(),
                recursion,
                *min_alpha,
                &cli.out,
            )?;
            println!(
                "wrote {} records at recursion {} to {}",
                summary.records,
                summary.recursion,
                cli.out.display()
            );
        }
        Command::Bench { repetitions } => {
            let report = commands::cmd_bench(&cli.scene()?, *repetitions)?;
            println!("recursion         {}", report.recursion);
            println!("evaluations       {}", report.evaluations);
            println!("median time       {:.4} s", report.median_seconds);
            println!(
                "throughput        {:.3e} poses/s",
                report.evaluations_per_second
            );
        }
        Command::Score => {
            let list = load_scene_list(cli.config_path()?)?;
            let report = commands::cmd_score(&list, &cli.out, |i, config| {
                cli.apply_overrides(config);
                if let Some(seed) = cli.seed {
                    config.seed = Some(seed.wrapping_add(i as u64));
                }
            })?;
            for (object, ll) in &report.mean.per_object {
                println!("{object:<24} {ll:.4}");
            }
            println!("{:<24} {:.4}", "meanLL", report.mean.overall);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
