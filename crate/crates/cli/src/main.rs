//! `shapematch` command-line tool.
//!
//! Exit codes: 0 success, 2 bad arguments or input, 3 missing or invalid
//! state (checkpoints, bundles), 4 training divergence.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapematch::pipeline::{animate, ensure_sketch, ramp_schedule, FeatureSource, SeedMode};
use shapematch::{
    load_image, save_png, toy, train_style, Error, GridTag, RenderRequest, StyleAsset, StyleLibrary, StyleRef,
    TextDataset, TextDatasetBuilder, TrainConfig,
};

#[derive(Parser)]
#[command(name = "shapematch", version, about = "Scale-controllable artistic text stylization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shared sketch module.
    TrainSketch {
        #[command(flatten)]
        text: TextArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a style bundle from a style image and its structure map.
    TrainStyle {
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        /// Structure map marks the subject dark on light.
        #[arg(long)]
        invert_structure: bool,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0.0)]
        gly_weight: f64,
        /// Styles directory; the bundle goes to `<out-dir>/<name>/`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Sketch checkpoint, trained here first when missing.
        #[arg(long)]
        sketch: PathBuf,
        /// SMG1 file with pretrained feature weights for the style loss.
        #[arg(long)]
        feature_weights: Option<PathBuf>,
        #[command(flatten)]
        text: TextArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Stylize one text image.
    Render {
        #[arg(long)]
        style: String,
        #[command(flatten)]
        input: RenderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Structure from one style, texture from another.
    Mashup {
        #[arg(long)]
        glyph_style: String,
        #[arg(long)]
        texture_style: String,
        #[command(flatten)]
        input: RenderArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a sequence of frames along an `l` ramp.
    Animate {
        #[arg(long)]
        style: String,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        invert: bool,
        #[arg(long, default_value_t = 0.0)]
        l_start: f64,
        #[arg(long, default_value_t = 1.0)]
        l_end: f64,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SeedModeArg::Fixed)]
        seed_mode: SeedModeArg,
        #[arg(long, env = shapematch_server::STYLES_DIR_ENV, default_value = "styles")]
        styles_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, env = shapematch_server::STYLES_DIR_ENV, default_value = "styles")]
        styles_dir: PathBuf,
    },
}

#[derive(Args)]
struct TextArgs {
    /// Directory of text images (white strokes on black unless `--invert-text`).
    #[arg(long, conflicts_with_all = ["procedural", "font_dir"])]
    text_dir: Option<PathBuf>,
    #[arg(long)]
    invert_text: bool,
    /// Rasterize glyphs from the fonts in this directory.
    #[arg(long, conflicts_with = "procedural")]
    font_dir: Vec<PathBuf>,
    /// Generate stroke images instead of reading text.
    #[arg(long)]
    procedural: bool,
    /// Number of generated samples.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Side length of generated samples.
    #[arg(long)]
    size: Option<usize>,
    /// Multiplier on procedural stroke width.
    #[arg(long)]
    stroke_weight: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size networks and 256-pixel crops.
    Full,
    /// The small configuration used for the synthetic circle style.
    Toy,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Overrides the step count of every stage.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    text: PathBuf,
    /// Text image is dark ink on a light background.
    #[arg(long)]
    invert: bool,
    #[arg(long)]
    l: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = shapematch_server::STYLES_DIR_ENV, default_value = "styles")]
    styles_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedModeArg {
    Fixed,
    Walk,
}

impl From<SeedModeArg> for SeedMode {
    fn from(m: SeedModeArg) -> Self {
        match m {
            SeedModeArg::Fixed => SeedMode::Fixed,
            SeedModeArg::Walk => SeedMode::Walk,
        }
    }
}

impl TextArgs {
    fn dataset(&self, preset: Preset, seed: u64) -> shapematch::Result<TextDataset> {
        if let Some(dir) = &self.text_dir {
            return TextDataset::from_dir(dir, self.invert_text);
        }
        let size = self.size.unwrap_or(match preset {
            Preset::Full => shapematch::text::DEFAULT_TEXT_SIZE,
            Preset::Toy => toy::TOY_SIZE,
        });
        let stroke_weight = self.stroke_weight.unwrap_or(match preset {
            Preset::Full => 1.0,
            Preset::Toy => toy::TOY_STROKE_WEIGHT,
        });
        let builder = TextDatasetBuilder {
            font_dirs: self.font_dir.clone(),
            size,
            procedural: self.procedural,
            stroke_weight,
            ..Default::default()
        };
        if !self.procedural && self.font_dir.is_empty() {
            return Err(Error::Argument("give one of --text-dir, --font-dir or --procedural".into()));
        }
        builder.build(self.count, seed)
    }
}

impl TrainArgs {
    fn config(&self, sketch: PathBuf, styles: PathBuf) -> TrainConfig {
        let mut cfg = match self.preset {
            Preset::Full => TrainConfig::new(sketch, styles),
            Preset::Toy => toy::train_config(sketch, styles),
        };
        if let Some(n) = self.steps {
            cfg.sketch.steps = n;
            cfg.glyph.stage_steps = [n; 3];
            cfg.texture.steps = n;
        }
        cfg
    }
}

fn run(cli: Cli) -> shapematch::Result<()> {
    match cli.command {
        Command::TrainSketch { text, train, out } => {
            if out.exists() {
                return Err(Error::Argument(format!("{} already exists", out.display())));
            }
            let data = text.dataset(train.preset, train.seed)?;
            let cfg = train.config(out.clone(), PathBuf::new());
            ensure_sketch(&out, &data, &cfg.sketch, &mut ChaCha8Rng::seed_from_u64(train.seed))?;
            println!("{}", out.display());
        }
        Command::TrainStyle {
            style,
            structure,
            invert_structure,
            name,
            gly_weight,
            out_dir,
            sketch,
            feature_weights,
            text,
            train,
        } => {
            let asset = StyleAsset::new(
                name,
                load_image(&style, GridTag::Style, false)?,
                load_image(&structure, GridTag::Structure, invert_structure)?,
                gly_weight,
            )?;
            let data = text.dataset(train.preset, train.seed)?;
            let mut cfg = train.config(sketch, out_dir);
            if let Some(w) = feature_weights {
                cfg.features = FeatureSource::Pretrained(w);
            }
            let report = train_style(&asset, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(train.seed))?;
            println!("{}", report.bundle_dir.display());
        }
        Command::Render { style, input, out } => {
            render(StyleRef::Single(style), &input, &out)?;
        }
        Command::Mashup {
            glyph_style,
            texture_style,
            input,
            out,
        } => {
            let style = StyleRef::Mashup {
                glyph: glyph_style,
                texture: texture_style,
            };
            render(style, &input, &out)?;
        }
        Command::Animate {
            style,
            text,
            invert,
            l_start,
            l_end,
            frames,
            seed,
            seed_mode,
            styles_dir,
            out_dir,
        } => {
            let schedule = ramp_schedule(l_start, l_end, frames, seed, seed_mode.into())?;
            let text = load_image(&text, GridTag::Text, invert)?;
            let bundle = StyleLibrary::new(styles_dir).get(&style)?;
            let files = animate(bundle.composition(), &text, &schedule, &out_dir)?;
            println!("{} frames in {}", files.len(), out_dir.display());
        }
        Command::Serve { port, host, styles_dir } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(shapematch_server::serve(SocketAddr::new(host, port), styles_dir))?;
        }
    }
    Ok(())
}

fn render(style: StyleRef, input: &RenderArgs, out: &PathBuf) -> shapematch::Result<()> {
    let text = load_image(&input.text, GridTag::Text, input.invert)?;
    let lib = StyleLibrary::new(&input.styles_dir);
    let img = lib.render(&RenderRequest {
        text,
        l: input.l,
        seed: input.seed,
        style,
    })?;
    save_png(&img, out)
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Argument(_) | Error::Shape(_) | Error::Image { .. } => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
