use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use stylematch::checkpoint::{save_checkpoint, Checkpoint};
use stylematch::corpus::{load_items, VocabMode};
use stylematch::recommend::{export_index, topk_exact, transform_query};
use stylematch::rng::{self, tags};
use stylematch::{EncoderHyperParams, LevelSpec, StyleModel};
use stylematch_ffi::*;

const ITEMS: &str =
    "a\tred wool coat\nb\tblue denim jeans\nc\tred silk scarf\nd\twool hat\ne\tdenim jacket blue\n";

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    items: CString,
    dir: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let items_path = dir.path().join("items.tsv");
    std::fs::write(&items_path, ITEMS).unwrap();
    let (_, vocab) = load_items(&items_path, VocabMode::Build, None).unwrap();
    let hyper = EncoderHyperParams {
        embed_dim: 4,
        levels: vec![LevelSpec::new(2, 3, 2), LevelSpec::new(2, 2, 2)],
        repr_dim: 3,
        dropout: 0.0,
    };
    let model =
        StyleModel::init(hyper, vocab.len(), &mut rng::stream(9, &[tags::INIT]), None).unwrap();
    let ckpt_path = dir.path().join("model.dsm");
    save_checkpoint(&ckpt_path, &Checkpoint::new(vocab, model).unwrap()).unwrap();
    Fixture {
        ckpt: cstr(&ckpt_path),
        items: cstr(&items_path),
        dir: dir.path().to_owned(),
        _dir: dir,
    }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load_model(f: &Fixture) -> *mut SmModel {
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { sm_model_load(f.ckpt.as_ptr(), &mut model) },
        SmStatus::Ok
    );
    assert!(sm_last_error().is_null());
    model
}

#[test]
fn encode_and_probability_match_the_library() {
    let f = fixture();
    let model = load_model(&f);
    let title = CString::new("red wool coat").unwrap();
    let other = CString::new("blue denim jeans").unwrap();
    unsafe {
        assert_eq!(sm_model_repr_dim(model), 3);
        let mut x = [0f32; 3];
        assert_eq!(
            sm_model_encode(model, title.as_ptr(), x.as_mut_ptr(), 3),
            SmStatus::Ok
        );

        let ckpt = stylematch::load_checkpoint(Path::new(f.ckpt.to_str().unwrap())).unwrap();
        let ids = ckpt.vocab.encode(["red", "wool", "coat"]);
        assert_eq!(ckpt.model.encode(&ids).unwrap(), x.to_vec());

        let mut small = [0f32; 2];
        assert_eq!(
            sm_model_encode(model, title.as_ptr(), small.as_mut_ptr(), 2),
            SmStatus::BufferTooSmall
        );
        assert!(last_error().contains("need 3"));

        let mut p = 0f64;
        assert_eq!(
            sm_model_match_probability(model, title.as_ptr(), other.as_ptr(), &mut p),
            SmStatus::Ok
        );
        assert!(p > 0.0 && p < 1.0);
        sm_model_free(model);
    }
}

#[test]
fn recommend_matches_exact_search() {
    let f = fixture();
    let model = load_model(&f);
    let mut index = ptr::null_mut();
    unsafe {
        assert_eq!(
            sm_index_build(model, f.items.as_ptr(), &mut index),
            SmStatus::Ok
        );
        assert_eq!(sm_index_len(index), 5);

        let saved = cstr(&f.dir.join("items.dsi"));
        assert_eq!(sm_index_save(index, saved.as_ptr()), SmStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(sm_index_load(saved.as_ptr(), &mut reloaded), SmStatus::Ok);

        let query = CString::new("red wool coat").unwrap();
        let exclude = CString::new("a").unwrap();
        let mut positions = [0usize; 3];
        let mut probs = [0f64; 3];
        let mut count = 0usize;
        assert_eq!(
            sm_recommend(
                model,
                reloaded,
                query.as_ptr(),
                exclude.as_ptr(),
                3,
                positions.as_mut_ptr(),
                probs.as_mut_ptr(),
                &mut count,
            ),
            SmStatus::Ok
        );
        assert_eq!(count, 3);

        let mut got = Vec::new();
        for &pos in &positions[..count] {
            let mut needed = 0usize;
            assert_eq!(
                sm_index_item_id(reloaded, pos, ptr::null_mut(), 0, &mut needed),
                SmStatus::BufferTooSmall
            );
            let mut buf = vec![0 as std::ffi::c_char; needed];
            assert_eq!(
                sm_index_item_id(reloaded, pos, buf.as_mut_ptr(), needed, ptr::null_mut()),
                SmStatus::Ok
            );
            got.push(CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned());
        }

        let ckpt = stylematch::load_checkpoint(Path::new(f.ckpt.to_str().unwrap())).unwrap();
        let (catalog, _) = load_items(
            Path::new(f.items.to_str().unwrap()),
            VocabMode::Frozen,
            Some(ckpt.vocab.clone()),
        )
        .unwrap();
        let direct = export_index(&ckpt.model, &catalog).unwrap();
        let x_q = ckpt.model.encode(catalog.title(0)).unwrap();
        let tq = transform_query(&ckpt.model.compat, &x_q).unwrap();
        let expected: Vec<String> = topk_exact(&direct, &tq, 5)
            .unwrap()
            .into_iter()
            .map(|h| h.item_id)
            .filter(|id| id != "a")
            .take(3)
            .collect();
        assert_eq!(got, expected);
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));

        sm_index_free(reloaded);
        sm_index_free(index);
        sm_model_free(model);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            sm_model_load(ptr::null(), &mut model),
            SmStatus::NullArgument
        );
        assert!(last_error().contains("path"));

        let missing = cstr(&f.dir.join("missing.dsm"));
        assert_eq!(sm_model_load(missing.as_ptr(), &mut model), SmStatus::Io);
        assert!(model.is_null());

        let bogus = f.dir.join("bogus.dsi");
        std::fs::write(&bogus, b"NOPE....").unwrap();
        let mut index = ptr::null_mut();
        assert_eq!(
            sm_index_load(cstr(&bogus).as_ptr(), &mut index),
            SmStatus::Format
        );
        assert!(last_error().contains("DSI1"));

        let model = load_model(&f);
        let empty = CString::new("   ").unwrap();
        let mut x = [0f32; 3];
        assert_eq!(
            sm_model_encode(model, empty.as_ptr(), x.as_mut_ptr(), 3),
            SmStatus::InvalidArgument
        );
        assert_eq!(sm_index_len(ptr::null()), 0);
        assert_eq!(sm_model_repr_dim(ptr::null()), 0);
        sm_model_free(ptr::null_mut());
        sm_index_free(ptr::null_mut());
        sm_model_free(model);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stylematch.h"))
            .unwrap();
    for name in [
        "sm_last_error",
        "sm_model_load",
        "sm_model_free",
        "sm_model_repr_dim",
        "sm_model_encode",
        "sm_model_match_probability",
        "sm_index_build",
        "sm_index_load",
        "sm_index_save",
        "sm_index_free",
        "sm_index_len",
        "sm_index_item_id",
        "sm_recommend",
        "SM_STATUS_BUFFER_TOO_SMALL",
        "typedef struct SmModel SmModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"stylematch.h\"\n\
         int main(void) {\n\
           SmModel *m = 0;\n\
           SmStatus s = sm_model_load(\"x.dsm\", &m);\n\
           sm_model_free(m);\n\
           return s == SM_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-I")
        .arg(include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            std::process::Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}
