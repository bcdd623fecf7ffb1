#include <doctest.h>

#include <functional>
#include <string>

#include "instructtime/config.hpp"

using namespace instructtime;

namespace {

std::string message_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

ErrKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    throw std::logic_error("expected an Error");
}

}  // namespace

TEST_CASE("ini parsing keeps section order and merges duplicates") {
    const auto doc = parse_ini(
        "# leading comment\n"
        "[alpha]\n"
        "x = 1\n"
        "x = 2\n"
        "; another comment style\n"
        "[beta]\n"
        "y = a=b\n"
        "\n"
        "[alpha]\n"
        "z =  spaced out  \n");
    REQUIRE(doc.sections.size() == 2);
    CHECK(doc.sections[0].first == "alpha");
    CHECK(doc.sections[1].first == "beta");
    const auto* alpha = doc.find("alpha");
    REQUIRE(alpha != nullptr);
    CHECK(alpha->at("x") == "2");            // last duplicate wins
    CHECK(alpha->at("z") == "spaced out");   // trimmed
    CHECK(doc.find("beta")->at("y") == "a=b");  // split at first '='
    CHECK(doc.find("gamma") == nullptr);
}

TEST_CASE("ini errors carry the line number") {
    CHECK(message_of([] { parse_ini("[oops\n"); }).find("line 1") != std::string::npos);
    CHECK(message_of([] { parse_ini("\n\n[]\n"); }).find("line 3") != std::string::npos);
    CHECK(message_of([] { parse_ini("# c\n[s]\nnot a pair\n"); }).find("line 3") !=
          std::string::npos);
    CHECK(message_of([] { parse_ini("x = 1\n"); }).find("outside any [section]") !=
          std::string::npos);
    CHECK(message_of([] { parse_ini("[s]\n= 1\n"); }).find("empty key") != std::string::npos);
    CHECK(kind_of([] { parse_ini("[oops\n"); }) == ErrKind::config);
}

TEST_CASE("overrides address section.key with the last dot as separator") {
    IniDoc doc;
    apply_override(doc, "model.d_model=64");
    CHECK(doc.find("model")->at("d_model") == "64");
    apply_override(doc, "model.d_model=128");
    CHECK(doc.find("model")->at("d_model") == "128");
    apply_override(doc, "synthetic.waves.sigma = 0.5");
    REQUIRE(doc.find("synthetic.waves") != nullptr);
    CHECK(doc.find("synthetic.waves")->at("sigma") == "0.5");

    CHECK(kind_of([] { IniDoc d; apply_override(d, "no_equals"); }) == ErrKind::usage);
    CHECK(kind_of([] { IniDoc d; apply_override(d, "nodot=1"); }) == ErrKind::usage);
    CHECK(kind_of([] { IniDoc d; apply_override(d, ".key=1"); }) == ErrKind::usage);
    CHECK(kind_of([] { IniDoc d; apply_override(d, "section.=1"); }) == ErrKind::usage);
}

TEST_CASE("defaults materialize without any config text") {
    const auto cfg = parse_app_config("", {});
    CHECK(cfg.seed == 0);
    CHECK(cfg.corpus_root == "data");
    CHECK(cfg.synthetic.empty());
    CHECK(cfg.pretrain_cfg.phase == "pretrain");
    CHECK(cfg.pretrain_cfg.learning_rate == 5e-5);
    CHECK(cfg.pretrain_cfg.epochs == 10);
    CHECK(cfg.sft_cfg.phase == "sft");
    CHECK(cfg.sft_cfg.learning_rate == 1e-5);
    CHECK(cfg.sft_cfg.epochs == 5);
    CHECK(cfg.sft_from == "pretrained");
    CHECK(cfg.grid.codebook_sizes == std::vector<int>{32});
    CHECK(cfg.dump_split == "train");
    CHECK(cfg.dump_mode == "sft_train");
}

TEST_CASE("sections bind their keys and synthetic sections take their name") {
    const std::string text =
        "[run]\n"
        "seed = 41\n"
        "[synthetic.waves]\n"
        "classes = sine, square\n"
        "length = 32\n"
        "patch_size = 4\n"
        "sigma = 0.05\n"
        "[synthetic.beats]\n"
        "classes = sawtooth\n"
        "[model]\n"
        "d_model = 48\n"
        "projector_hidden = 8, 24, 48\n"
        "[pretrain]\n"
        "epochs = 3\n"
        "text = false\n"
        "[sft]\n"
        "fraction = 0.25\n"
        "from = fresh\n"
        "[grid]\n"
        "codebook_sizes = 16,32\n"
        "fractions = 0.1, 1\n"
        "text = true, false\n";
    const auto cfg = parse_app_config(text, {});
    CHECK(cfg.seed == 41);
    REQUIRE(cfg.synthetic.size() == 2);
    CHECK(cfg.synthetic[0].name == "waves");
    CHECK(cfg.synthetic[0].classes == std::vector<std::string>{"sine", "square"});
    CHECK(cfg.synthetic[0].length == 32);
    CHECK(cfg.synthetic[0].sigma == 0.05);
    CHECK(cfg.synthetic[0].channels == 1);  // untouched default
    CHECK(cfg.synthetic[1].name == "beats");
    CHECK(cfg.model.d_model == 48);
    CHECK(cfg.model.projector_hidden == std::vector<int>{8, 24, 48});
    CHECK(cfg.pretrain_cfg.epochs == 3);
    CHECK_FALSE(cfg.pretrain_cfg.text_in_pretrain);
    CHECK(cfg.sft_fraction == 0.25);
    CHECK(cfg.sft_from == "fresh");
    CHECK(cfg.grid.codebook_sizes == std::vector<int>{16, 32});
    CHECK(cfg.grid.fractions == std::vector<Real>{0.1, 1.0});
    CHECK(cfg.grid.text_options == std::vector<bool>{true, false});
    CHECK(cfg.grid.pretrain_options == std::vector<bool>{true});  // default kept
}

TEST_CASE("unknown sections and keys are rejected by name") {
    CHECK(message_of([] { parse_app_config("[bogus]\nx = 1\n", {}); }) ==
          "unknown config section 'bogus'");
    CHECK(message_of([] { parse_app_config("[model]\nbanana = 1\n", {}); }) ==
          "unknown config key 'model.banana'");
    CHECK(message_of([] { parse_app_config("[synthetic.w]\nwobble = 1\n", {}); }) ==
          "unknown config key 'synthetic.w.wobble'");
    // A bare "synthetic." section has an empty name and is not a synthetic block.
    CHECK(kind_of([] { parse_app_config("[synthetic.]\nlength = 8\n", {}); }) == ErrKind::config);
}

TEST_CASE("values are type-checked with the offending text in the message") {
    CHECK(message_of([] { parse_app_config("[model]\nd_model = abc\n", {}); }) ==
          "config key 'model.d_model' expects an integer, got 'abc'");
    CHECK(message_of([] { parse_app_config("[tokenizer]\nbeta = soft\n", {}); }) ==
          "config key 'tokenizer.beta' expects a real number, got 'soft'");
    CHECK(message_of([] { parse_app_config("[pretrain]\ntext = TRUE\n", {}); }) ==
          "config key 'pretrain.text' expects true or false, got 'TRUE'");
    CHECK(message_of([] { parse_app_config("[run]\nseed = -3\n", {}); }) ==
          "config key 'run.seed' expects a non-negative integer, got '-3'");
    CHECK(message_of([] { parse_app_config("[grid]\ncodebook_sizes = 16,x\n", {}); }) ==
          "config key 'grid.codebook_sizes' expects an integer, got 'x'");
}

TEST_CASE("enum-like keys validate their values") {
    CHECK(message_of([] { parse_app_config("[sft]\nfrom = scratch\n", {}); }) ==
          "config key 'sft.from' expects pretrained or fresh, got 'scratch'");
    CHECK(message_of([] { parse_app_config("[dump]\nsplit = val\n", {}); }) ==
          "config key 'dump.split' expects train or test, got 'val'");
    CHECK(message_of([] { parse_app_config("[dump]\nmode = freeform\n", {}); }).find(
              "dump.mode") != std::string::npos);
}

TEST_CASE("command-line overrides beat the file and apply in order") {
    const std::string text = "[model]\nd_model = 48\n";
    const auto cfg =
        parse_app_config(text, {"model.d_model=64", "run.seed=5", "model.d_model=96"});
    CHECK(cfg.model.d_model == 96);
    CHECK(cfg.seed == 5);
    // Overrides land before binding, so they are type-checked too.
    CHECK(kind_of([&] { parse_app_config(text, {"model.d_model=huge"}); }) == ErrKind::config);
}

TEST_CASE("serialized config parses back to the same serialization") {
    AppConfig cfg;
    cfg.seed = 1234;
    cfg.corpus_root = "runs/corpus";
    SyntheticSpec s;
    s.name = "waves";
    s.classes = {"sine", "square"};
    s.sigma = 0.125;
    s.freq_min = 2.5;
    cfg.synthetic.push_back(s);
    cfg.model.d_model = 48;
    cfg.model.projector_hidden = {16, 32, 48};
    cfg.pretrain_cfg.learning_rate = 3e-4;
    cfg.pretrain_cfg.text_in_pretrain = false;
    cfg.sft_domain = "waves";
    cfg.sft_fraction = 0.1;
    cfg.grid.codebook_sizes = {16, 32};
    cfg.grid.patch_sizes = {};
    cfg.grid.fractions = {0.1, 0.4, 1.0};
    cfg.grid.text_options = {true, false};
    cfg.eval_max_new = 24;
    cfg.out_dir = "runs/out";

    const std::string first = serialize_app_config(cfg);
    const AppConfig reparsed = parse_app_config(first, {});
    const std::string second = serialize_app_config(reparsed);
    CHECK(first == second);

    CHECK(reparsed.seed == 1234);
    REQUIRE(reparsed.synthetic.size() == 1);
    CHECK(reparsed.synthetic[0].sigma == 0.125);
    CHECK(reparsed.grid.fractions == cfg.grid.fractions);
    CHECK(reparsed.grid.patch_sizes.empty());
    CHECK(reparsed.pretrain_cfg.text_in_pretrain == false);

    // Defaults round-trip the same way.
    const std::string d1 = serialize_app_config(AppConfig{});
    const std::string d2 = serialize_app_config(parse_app_config(d1, {}));
    CHECK(d1 == d2);
}

TEST_CASE("loading a missing config file is an io error") {
    CHECK(kind_of([] { load_app_config("/nonexistent/conf.ini", {}); }) == ErrKind::io);
}
