use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lco_core::embdump::write_emb;
use lco_core::numerics::Matrix;
use lco_core::toymodel::Checkpoint;

const TINY: &str = "world.K = 16
world.modalities = image:6:0.1
model.enc_hidden = 8
model.trunk = 16,8
pretrain.steps = 20
pretrain.batch = 8
pretrain.sources = image,text
cl.steps = 5
cl.batch = 4
eval.heldout = 64
eval.align_batch = 32
eval.align_k = 3
eval.queries = 16
eval.probe_shots = 2
replicate.seeds = 2
grsl.steps = 0,5,10
seadoc.extra_steps = 5
bound.seeds = 3
bound.pool_batches = 2
bound.cl_steps = 3
bound.heldout_batches = 2
info.K = 4
info.n_mc = 200
info.heldout = 32
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn lco(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lco")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    /// Runs with the tiny config into `out`.
    fn run(&self, cmd: &[&str], out: &str) -> Output {
        let mut args = cmd.to_vec();
        args.extend(["--config", "tiny.cfg", "--out-dir", out]);
        self.lco(&args)
    }

    fn ok(&self, cmd: &[&str], out: &str) -> PathBuf {
        let o = self.run(cmd, out);
        assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
        self.path(out)
    }

    fn write_emb(&self, name: &str, modality: &str, m: &Matrix) -> PathBuf {
        let mut buf = Vec::new();
        write_emb(modality, m, &mut buf).unwrap();
        let p = self.path(name);
        fs::write(&p, buf).unwrap();
        p
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn anisotropy_of_identical_vectors_is_one() {
    let sb = Sandbox::new();
    sb.write_emb("same.emb", "image", &Matrix::filled(5, 3, 0.25));
    let out = sb.ok(&["analyze", "--metric", "anisotropy", "--emb", "same.emb"], "an");
    let csv = read(&out.join("analyze.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "seed,dataset,modality,metric,layer,k,n,value");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[2..7], ["image", "anisotropy", "final", "", "5"]);
    assert_eq!(row[7].parse::<f64>().unwrap(), 1.0);
    assert!(out.join("provenance.json").exists() && out.join("summary.json").exists());
}

#[test]
fn truncated_import_exits_2() {
    let sb = Sandbox::new();
    let p = sb.write_emb("full.emb", "audio", &Matrix::filled(4, 3, 1.0));
    let bytes = fs::read(&p).unwrap();
    fs::write(sb.path("cut.emb"), &bytes[..bytes.len() - 5]).unwrap();
    let o = sb.run(&["import-emb", "--emb", "cut.emb"], "im");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cut.emb") && err.contains("truncated"), "{err}");

    let out = sb.ok(&["import-emb", "--emb", "full.emb"], "ok");
    assert_eq!(fs::read(out.join("audio.emb")).unwrap(), bytes);
    assert!(read(&out.join("import.csv")).starts_with("file,modality,dim,count,hash\naudio.emb,audio,3,4,"));
}

#[test]
fn exit_codes() {
    let sb = Sandbox::new();
    let o = sb.run(&["import-emb", "--emb", "missing.emb"], "x");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.emb"));

    let o = sb.lco(&["pretrain", "--set", "cl.tau=-1", "--out-dir", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cl.tau"));

    fs::write(sb.path("bad.cfg"), "world.K = 16\nworld.colour = red\n").unwrap();
    let o = sb.lco(&["gen-world", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("world.colour"));

    let o = sb.lco(&["gen-world", "--config", "nope.cfg"]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(sb.lco(&["replicate", "fig9"]).status.code(), Some(1));
    assert_eq!(sb.lco(&["--help"]).status.code(), Some(0));

    fs::write(sb.path("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = sb.run(&["eval", "--checkpoint", "junk.ckpt"], "x");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_chain_is_reproducible() {
    let sb = Sandbox::new();
    let chain = |suffix: &str| {
        let pt = sb.ok(&["pretrain", "--dump-emb"], &format!("pt{suffix}"));
        let ckpt = pt.join("pretrained.ckpt");
        let cl = sb.ok(&["cl-train", "--checkpoint", ckpt.to_str().unwrap(), "--dump-emb"], &format!("cl{suffix}"));
        let ev = sb.ok(&["eval", "--checkpoint", cl.join("refined.ckpt").to_str().unwrap(), "--arm", "lora"], &format!("ev{suffix}"));
        (pt, cl, ev)
    };
    let a = chain("a");
    let b = chain("b");
    for (x, y) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
        let (bx, by) = (dir_bytes(x), dir_bytes(y));
        // the provenance of later stages names the input path, which differs by suffix
        let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> { v.into_iter().filter(|(n, _)| n != "provenance.json").collect() };
        assert_eq!(strip(bx), strip(by), "{}", x.display());
    }
    assert_eq!(read(&a.0.join("provenance.json")), read(&b.0.join("provenance.json")));

    let metrics = read(&a.2.join("metrics.csv"));
    assert!(metrics.starts_with("seed,dataset,arm,modality,metric,value\n"));
    assert!(metrics.contains(",lora,image,recall_at_1,"));

    let prov: serde_json::Value = serde_json::from_str(&read(&a.1.join("provenance.json"))).unwrap();
    assert_eq!(prov["config"]["cl.steps"], "5");
    assert_eq!(prov["config"]["lora.r"], "8");
    let inputs = prov["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.starts_with("checkpoint:")));
    assert!(inputs.keys().any(|k| k.starts_with("config:")));

    let refined = Checkpoint::from_bytes(&fs::read(a.1.join("refined.ckpt")).unwrap()).unwrap();
    let parent = Checkpoint::from_bytes(&fs::read(a.0.join("pretrained.ckpt")).unwrap()).unwrap();
    assert_eq!(refined.meta["parent"], parent.id());
    assert_eq!(refined.meta["strategy"], "lora");
}

#[test]
fn soup_of_a_checkpoint_with_itself_is_identity() {
    let sb = Sandbox::new();
    let pt = sb.ok(&["pretrain"], "pt");
    let c = pt.join("pretrained.ckpt");
    let c = c.to_str().unwrap();
    let sp = sb.ok(&["soup", "--checkpoint", c, "--checkpoint", c], "sp");
    let a = Checkpoint::from_bytes(&fs::read(pt.join("pretrained.ckpt")).unwrap()).unwrap();
    let b = Checkpoint::from_bytes(&fs::read(sp.join("soup.ckpt")).unwrap()).unwrap();
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(a.id(), b.id());
    assert_eq!(sb.run(&["soup", "--checkpoint", c], "sp1").status.code(), Some(1));
}

#[test]
fn replicate_is_byte_identical_across_runs_and_threads() {
    let sb = Sandbox::new();
    for target in ["fig1", "table4", "bound"] {
        let one = sb.path(&format!("{target}-1"));
        let two = sb.path(&format!("{target}-2"));
        let run = |out: &Path, threads: &str| {
            let o = Command::new(env!("CARGO_BIN_EXE_lco"))
                .current_dir(sb.dir.path())
                .env("LCO_THREADS", threads)
                .args(["replicate", target, "--config", "tiny.cfg", "--out-dir", out.to_str().unwrap()])
                .output()
                .unwrap();
            assert!(o.status.success(), "{target}: {}", String::from_utf8_lossy(&o.stderr));
        };
        run(&one, "1");
        run(&two, "3");
        assert_eq!(dir_bytes(&one), dir_bytes(&two), "{target}");
        assert!(dir_bytes(&one).iter().any(|(n, _)| n.ends_with(".csv")));
    }
}

#[test]
fn dump_retrieval_and_alignment() {
    let sb = Sandbox::new();
    let docs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    let queries = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9], vec![0.0, 1.0]]).unwrap();
    sb.write_emb("d.emb", "text", &docs);
    sb.write_emb("q.emb", "image", &queries);
    fs::write(sb.path("qrels.tsv"), "0\t0\n1\t1\n2\t2\n").unwrap();
    let out = sb.ok(&["eval", "--queries", "q.emb", "--docs", "d.emb", "--qrels", "qrels.tsv", "--k", "2"], "ev");
    let csv = read(&out.join("retrieval.csv"));
    let value = |metric: &str| -> f64 {
        csv.lines().find(|l| l.split(',').nth(2) == Some(metric)).unwrap().rsplit(',').next().unwrap().parse().unwrap()
    };
    assert_eq!(value("recall_at_1"), 2.0 / 3.0);
    // third query ranks 1, 0, 2: its relevant doc is outside the top 2
    assert_eq!(value("recall_at_2"), 2.0 / 3.0);
    assert_eq!(value("ndcg_at_2"), 2.0 / 3.0);

    fs::write(sb.path("bad.tsv"), "0\t7\n").unwrap();
    let o = sb.run(&["eval", "--queries", "q.emb", "--docs", "d.emb", "--qrels", "bad.tsv"], "ev2");
    assert_eq!(o.status.code(), Some(1));

    let out = sb.ok(&["analyze", "--metric", "alignment", "--emb", "q.emb", "--emb", "q.emb", "--k", "1"], "al");
    let row = read(&out.join("analyze.csv")).lines().nth(1).unwrap().to_string();
    assert!(row.ends_with(",image~image,alignment,final,1,3,1"), "{row}");
}

#[test]
fn grsl_and_bound_formula_modes() {
    let sb = Sandbox::new();
    fs::write(
        sb.path("points.csv"),
        "model_id,gen_score,gen_direction,rep_score\na,3.0,lower,0.1\nb,2.0,lower,0.2\nc,1.0,lower,0.4\n",
    )
    .unwrap();
    let out = sb.ok(&["grsl", "--points", "points.csv"], "gr");
    let row = read(&out.join("grsl_fit.csv")).lines().nth(1).unwrap().to_string();
    assert!(row.starts_with("3,"), "{row}");
    assert_eq!(row.split(',').nth(2).unwrap().parse::<f64>().unwrap(), 1.0);

    let args = ["bound", "--kl", "10", "--batch-size-n", "128", "--i-p", "2", "--eps-p", "0.1", "--n-samples", "1000", "--delta", "0.05"];
    let out = sb.ok(&args, "bd");
    let v: f64 = read(&out.join("bound.csv")).lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((v - 3.03264).abs() < 1e-5, "{v}");
    let o = sb.run(&["bound", "--kl", "10"], "bd2");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_documents_csv_headers() {
    let sb = Sandbox::new();
    let help = String::from_utf8(sb.lco(&["analyze", "--help"]).stdout).unwrap();
    assert!(help.contains("seed,dataset,modality,metric,layer,k,n,value"));
    let help = String::from_utf8(sb.lco(&["replicate", "--help"]).stdout).unwrap();
    for header in ["seed,dataset,modality,pre,post,rel_change", "seed,dataset,arm,modality,metric,value"] {
        assert!(help.contains(header), "{header}");
    }
}
