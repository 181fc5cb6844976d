// SPDX-License-Identifier: Apache-2.0
//! `tdmig`: bundle toolkit, scenario runner and state inspection for the
//! migration model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tdmig_core::bundle::{list_context, patch_element, set_write_mask, Bundle, BundleError};
use tdmig_core::catalog::{identifier_line, Catalog};
use tdmig_core::codec::parse_list;
use tdmig_core::crypto::{BundleType, EnvelopeError, MigrationSessionKey};
use tdmig_core::engine::{BuildParams, Platform};
use tdmig_core::field_id::MdContext;
use tdmig_core::md_list::{join_lists, split_lists, MdList};
use tdmig_core::mode::{EngineMode, Variant};
use tdmig_core::scenario::{self, field_ref, parse_u64, ScenarioSpec, BUILTIN};
use tdmig_core::state_machine::PermissionMatrix;
use tdmig_core::td::snapshot;

#[derive(Parser)]
#[command(name = "tdmig", version, about = "Migration bundle toolkit and findings scenario runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect, decrypt, encrypt and edit .mbmd/.data bundle pairs.
    #[command(subcommand)]
    Bundle(BundleCmd),
    /// List or run findings scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// TD snapshots and the op_state permission matrix.
    #[command(subcommand)]
    State(StateCmd),
}

#[derive(Args)]
struct Pair {
    /// Bundle metadata file (.mbmd).
    mbmd: PathBuf,
    /// Bundle data file (.data), or plaintext lists with --plain.
    data: PathBuf,
}

#[derive(Subcommand)]
enum BundleCmd {
    /// Export a model TD's immutable, TD and VP bundles plus the session key.
    Export {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print every list of a bundle against the field catalog.
    Parse {
        #[command(flatten)]
        pair: Pair,
        /// Session key; without it DATA must be --plain.
        #[arg(long)]
        key: Option<MigrationSessionKey>,
        /// DATA holds decrypted lists.
        #[arg(long)]
        plain: bool,
    },
    /// Decrypt and authenticate a bundle, writing the plaintext lists.
    Decrypt {
        #[command(flatten)]
        pair: Pair,
        /// Session key: four hex quadwords joined by '-' (see key.txt from export).
        #[arg(long)]
        key: MigrationSessionKey,
        /// Plaintext output file.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Seal plaintext lists with the type and stream of MBMD under the next
    /// IV counter (or --counter).
    Encrypt {
        #[command(flatten)]
        pair: Pair,
        /// Session key: four hex quadwords joined by '-' (see key.txt from export).
        #[arg(long)]
        key: MigrationSessionKey,
        /// IV counter to seal under.
        #[arg(long)]
        counter: Option<u64>,
        /// Output stem: writes STEM.mbmd and STEM.data.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Patch field values or write masks, then re-seal.
    Edit {
        #[command(flatten)]
        pair: Pair,
        /// Session key: four hex quadwords joined by '-' (see key.txt from export).
        #[arg(long)]
        key: MigrationSessionKey,
        /// FIELD=VALUE, where FIELD is NAME[#field][:elem] or a raw identifier.
        #[arg(long = "set", value_name = "FIELD=VALUE")]
        sets: Vec<String>,
        /// Give FIELD a write mask of 0 so the importer skips it.
        #[arg(long = "skip", value_name = "FIELD")]
        skips: Vec<String>,
        /// FIELD=MASK: re-emit FIELD under an explicit write mask.
        #[arg(long = "mask", value_name = "FIELD=MASK")]
        masks: Vec<String>,
        /// Output stem: writes STEM.mbmd and STEM.data.
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Built-in scenarios with their titles.
    List,
    /// Print a built-in scenario's source.
    Show { name: String },
    /// Run a built-in scenario (or a .scn file) and print its transcript.
    Run {
        /// Built-in name or path to a scenario file.
        name: String,
        /// Engine behavior: vulnerable or fixed.
        #[arg(long, default_value = "vulnerable")]
        mode: Variant,
        /// Overrides the scenario's own seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum StateCmd {
    /// Snapshot of a fresh TD, or of the TDs left behind by a scenario.
    Dump {
        /// Run this scenario first and dump its TDs.
        #[arg(long)]
        scenario: Option<String>,
        /// Engine behavior: vulnerable or fixed.
        #[arg(long, default_value = "vulnerable")]
        mode: Variant,
        /// Scenario seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Only this scenario TD.
        #[arg(long)]
        td: Option<String>,
    },
    /// The op_state x leaf permission matrix.
    Matrix {
        /// Guest-side (TDCALL) rows instead of host-side.
        #[arg(long)]
        guest: bool,
        /// Include the OP_STATE_START_IMPORT row.
        #[arg(long)]
        start_import: bool,
    },
}

/// A command that ran but whose result contradicts what was asked for.
#[derive(Debug)]
struct Mismatch(String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Bundle(c) => bundle(c),
        Cmd::Scenario(c) => scenario_cmd(c),
        Cmd::State(c) => state(c),
    };
    match r {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", chain_message(&e));
            if e.downcast_ref::<Mismatch>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// `{:#}` without repeating causes that a message already embeds.
fn chain_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg
}

fn read_pair(p: &Pair) -> Result<Bundle> {
    Ok(Bundle::read_pair(&p.mbmd, &p.data)?)
}

fn write_stem(b: &Bundle, stem: &Path) -> Result<String> {
    let (m, d) = (stem.with_extension("mbmd"), stem.with_extension("data"));
    b.write_pair(&m, &d)?;
    Ok(format!("wrote {} and {}\n", m.display(), d.display()))
}

/// Authentication failures are reported as mismatches, everything else
/// as I/O.
fn open_err(e: BundleError) -> anyhow::Error {
    match e {
        BundleError::Envelope(EnvelopeError::Integrity) => Mismatch(e.to_string()).into(),
        e => anyhow!(e),
    }
}

fn open_lists(b: &Bundle, key: &MigrationSessionKey) -> Result<Vec<MdList>> {
    b.open_lists(key).map_err(open_err)
}

fn kind(b: &Bundle) -> Result<BundleType> {
    b.kind().ok_or_else(|| anyhow!("unknown bundle type in MBMD"))
}

fn bundle(c: BundleCmd) -> Result<String> {
    match c {
        BundleCmd::Export { seed, out } => export(seed, &out),
        BundleCmd::Parse { pair, key, plain } => {
            let b = read_pair(&pair)?;
            let lists = if plain {
                split_lists(&b.data).ok_or_else(|| anyhow!("{} is not a whole number of lists", pair.data.display()))?
            } else {
                let key = key.ok_or_else(|| anyhow!("--key is required unless --plain is given"))?;
                open_lists(&b, &key)?
            };
            render_bundle(&b, &lists)
        }
        BundleCmd::Decrypt { pair, key, out } => {
            let b = read_pair(&pair)?;
            let plain = b.open(&key).map_err(open_err)?;
            fs::write(&out, &plain).with_context(|| out.display().to_string())?;
            Ok(format!("MAC valid; wrote {} bytes to {}\n", plain.len(), out.display()))
        }
        BundleCmd::Encrypt { pair, key, counter, out } => {
            let template = Bundle::read_pair(&pair.mbmd, &pair.data)?;
            let m = template.mbmd;
            let counter = counter.unwrap_or(m.iv_counter + 1);
            let b = Bundle::seal(&key, kind(&template)?, m.stream_index, counter, &template.data);
            write_stem(&b, &out)
        }
        BundleCmd::Edit { pair, key, sets, skips, masks, out } => {
            let b = read_pair(&pair)?;
            let ty = kind(&b)?;
            let catalog = Catalog::builtin();
            let mut lists = open_lists(&b, &key)?;
            let mut log = String::new();
            for s in &sets {
                let (f, v) = split_assign(s)?;
                let id = resolve_field(catalog, ty, f)?;
                lists = patch_element(catalog, ty, &lists, id, v)?;
                let _ = writeln!(log, "set {f} = 0x{v:x}");
            }
            let masks = skips.iter().map(|f| Ok((f.as_str(), 0))).chain(masks.iter().map(|s| split_assign(s)));
            for m in masks {
                let (f, mask) = m?;
                let id = resolve_field(catalog, ty, f)?;
                lists = set_write_mask(catalog, ty, &lists, id, mask)?;
                let _ = writeln!(log, "write mask {f} = 0x{mask:x}");
            }
            let sealed = b.reseal(&key, &join_lists(&lists))?;
            log.push_str(&write_stem(&sealed, &out)?);
            Ok(log)
        }
    }
}

fn split_assign(s: &str) -> Result<(&str, u64)> {
    let (f, v) = s.split_once('=').ok_or_else(|| anyhow!("expected FIELD=VALUE, got {s:?}"))?;
    Ok((f, parse_u64(v).ok_or_else(|| anyhow!("bad number {v:?}"))?))
}

/// Looks a field up in every context the bundle type carries.
fn resolve_field(catalog: &Catalog, ty: BundleType, f: &str) -> Result<tdmig_core::field_id::MdFieldId> {
    let ctxs: &[MdContext] = match ty {
        BundleType::Immutable => &[MdContext::Sys, MdContext::Td],
        BundleType::Td => &[MdContext::Td],
        BundleType::Vp => &[MdContext::Vp],
        BundleType::Mem => bail!("memory bundles carry no metadata"),
    };
    ctxs.iter()
        .find_map(|&c| field_ref(catalog, c, f))
        .map(|(id, _)| id)
        .ok_or_else(|| anyhow!("unknown field {f:?} for a {} bundle", ty.name()))
}

fn render_bundle(b: &Bundle, lists: &[MdList]) -> Result<String> {
    let ty = kind(b)?;
    let catalog = Catalog::builtin();
    let mut out = String::new();
    let m = &b.mbmd;
    let _ = writeln!(
        out,
        "bundle: {}, stream {}, iv counter {}, {} data bytes",
        ty.name(),
        m.stream_index,
        m.iv_counter,
        b.data.len()
    );
    let _ = writeln!(out, "lists: {}", lists.len());
    for (i, list) in lists.iter().enumerate() {
        let ctx = list_context(ty, i).ok_or_else(|| anyhow!("memory bundles carry no metadata"))?;
        let seqs = parse_list(catalog, ctx, list).map_err(|e| anyhow!("list {i}: {e}"))?;
        let _ = writeln!(
            out,
            "list {i}: list_buff_size {}, num_sequences {}",
            list.header.list_buff_size, list.header.num_sequences
        );
        let _ = writeln!(out, "{}-scope metadata:", ctx.name().to_ascii_lowercase());
        for s in &seqs {
            if let Some(mask) = s.wr_mask {
                let _ = writeln!(out, "write mask: 0x{mask:x} (sequence at offset {})", s.offset);
            }
            for f in &s.fields {
                let e = &catalog.table(ctx)[f.pos.entry];
                for (k, v) in f.values.iter().enumerate() {
                    let _ = writeln!(out, "{}", identifier_line(e, e.element_id(f.pos.field, k as u32), *v));
                }
            }
        }
    }
    Ok(out)
}

fn export(seed: u64, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let mut p = Platform::new(EngineMode::fixed(), seed);
    let tdx = |e: tdmig_core::status::TdxError| anyhow!("{}", e.status.transcript_line());
    let m = p.migration_pair(&BuildParams::default()).map_err(tdx)?;
    let imm = p.export_state_immutable(m.src, m.src_stream).map_err(tdx)?;
    p.export_pause(m.src).map_err(tdx)?;
    let td = p.export_state_td(m.src, m.src_stream).map_err(tdx)?;
    let vp = p.export_state_vp(m.src, m.src_stream, 0).map_err(tdx)?;
    let mut out = String::new();
    for (name, b) in [("immutable", &imm), ("td", &td), ("vp0", &vp)] {
        out.push_str(&write_stem(b, &dir.join(name))?);
    }
    let key_path = dir.join("key.txt");
    fs::write(&key_path, format!("{}\n", m.key)).with_context(|| key_path.display().to_string())?;
    let _ = writeln!(out, "key {} written to {}", m.key, key_path.display());
    Ok(out)
}

fn load_scenario(name: &str) -> Result<ScenarioSpec> {
    if let Some(s) = scenario::builtin(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!("no built-in scenario or file named {name:?} (see `tdmig scenario list`)");
    }
    let text = fs::read_to_string(path).with_context(|| name.to_string())?;
    ScenarioSpec::parse(&text).map_err(|e| anyhow!("{name}: {e}"))
}

fn scenario_cmd(c: ScenarioCmd) -> Result<String> {
    match c {
        ScenarioCmd::List => {
            let mut out = String::new();
            for (name, _) in BUILTIN {
                let spec = scenario::builtin(name).expect("built-in scenarios parse");
                let _ = writeln!(out, "{name:<16} {}", spec.title);
            }
            Ok(out)
        }
        ScenarioCmd::Show { name } => BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| text.to_string())
            .ok_or_else(|| anyhow!("no built-in scenario {name:?}")),
        ScenarioCmd::Run { name, mode, seed } => {
            let spec = load_scenario(&name)?;
            let r = scenario::run(&spec, mode, seed);
            if r.passed() {
                Ok(r.transcript)
            } else {
                print!("{}", r.transcript);
                let why = r.divergence.unwrap_or_default();
                Err(Mismatch(format!("{name} ({mode}): {why}")).into())
            }
        }
    }
}

fn state(c: StateCmd) -> Result<String> {
    match c {
        StateCmd::Matrix { guest, start_import } => {
            let m = PermissionMatrix::builtin();
            Ok(if guest { m.render_guest() } else { m.render(start_import) })
        }
        StateCmd::Dump { scenario: None, seed, .. } => {
            let mut p = Platform::new(EngineMode::fixed(), seed.unwrap_or(1));
            let tdx = |e: tdmig_core::status::TdxError| anyhow!("{}", e.status.transcript_line());
            let tdr = p.mng_create().map_err(tdx)?;
            p.mng_key_config(tdr).map_err(tdx)?;
            Ok(snapshot(p.td(tdr).expect("just created")))
        }
        StateCmd::Dump { scenario: Some(name), mode, seed, td } => {
            let spec = load_scenario(&name)?;
            let r = scenario::run(&spec, mode, seed);
            let mut out = String::new();
            for (n, &tdr) in &r.tds {
                if td.as_ref().is_some_and(|want| want != n) {
                    continue;
                }
                let _ = writeln!(out, "[{n}]");
                match r.platform.td(tdr) {
                    Some(t) => out.push_str(&snapshot(t)),
                    None => out.push_str("torn down\n"),
                }
            }
            if out.is_empty() {
                bail!("scenario {name} has no TD named {}", td.unwrap_or_default());
            }
            Ok(out)
        }
    }
}
