// convctx: train, decode, score, average, info for the convolutional-context
// speech recognizer. Exit codes: 0 success, 1 input/config error, 2 numeric
// abort during training.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "convctx/audio.hpp"
#include "convctx/checkpoint.hpp"
#include "convctx/config.hpp"
#include "convctx/decode.hpp"
#include "convctx/model.hpp"
#include "convctx/optim.hpp"
#include "convctx/text.hpp"

namespace cx = convctx;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
};

cx::RunConfig resolve_config(const CommonArgs& args, bool need_file) {
    cx::RunConfig cfg;
    if (!args.config_path.empty()) {
        cfg = cx::load_config(args.config_path);
    } else if (need_file) {
        throw cx::InputError("a --config file is required");
    }
    for (const std::string& kv : args.overrides) cx::apply_override(cfg, kv);
    return cfg;
}

struct LoadedData {
    cx::Dataset dataset;
    cx::Vocab vocab;
};

cx::Dataset read_pcm_manifest(const cx::RunConfig& cfg, const cx::Vocab& vocab) {
    std::ifstream in(cfg.data.path);
    if (!in) throw cx::InputError("cannot open manifest '" + cfg.data.path + "'");
    cx::Dataset data;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id, path, transcript;
        if (!std::getline(row, id, '\t') || !std::getline(row, path, '\t')) {
            throw cx::InputError("manifest line " + std::to_string(line_no) +
                                 ": expected id<TAB>pcm-path<TAB>transcript");
        }
        std::getline(row, transcript);
        cx::Utterance utt;
        utt.id = id;
        utt.features = cx::logmel(cx::read_pcm_s16le(path), cfg.features);
        std::vector<int> ids = cx::encode(transcript, vocab);
        utt.tokens.assign(ids.begin() + 1, ids.end() - 1);  // strip bos/eos
        data.push_back(std::move(utt));
    }
    return data;
}

LoadedData load_data(cx::RunConfig& cfg) {
    LoadedData out;
    if (cfg.data.kind == "synthetic") {
        cfg.data.synthetic.validate();
        out.vocab = cx::Vocab::from_units(cx::synthetic_units(cfg.data.synthetic.alphabet_size));
        cfg.model.input_dim = cfg.data.synthetic.feat_dim;
        out.dataset =
            cx::make_synthetic(cfg.data.synthetic, cfg.data.synthetic_utts, cfg.data.synthetic_seed);
    } else {
        if (cfg.data.vocab.empty()) {
            throw cx::InputError("data.vocab is required for data.kind=" + cfg.data.kind);
        }
        out.vocab = cx::Vocab::load(cfg.data.vocab);
        if (cfg.data.kind == "features") {
            out.dataset = cx::load_dataset(cfg.data.path);
        } else {
            out.dataset = read_pcm_manifest(cfg, out.vocab);
        }
    }
    if (cfg.model.vocab_size == 0) {
        cfg.model.vocab_size = out.vocab.size();
    } else if (cfg.model.vocab_size != out.vocab.size()) {
        throw cx::ConfigError("model.vocab_size " + std::to_string(cfg.model.vocab_size) +
                              " does not match the " + std::to_string(out.vocab.size()) +
                              "-symbol vocabulary");
    }
    // Normalization belongs to the audio pipeline; synthetic features are
    // generated in feature space at unit scale already.
    if (cfg.features.normalize && cfg.data.kind != "synthetic") {
        for (cx::Utterance& u : out.dataset) u.features = cx::normalize_features(u.features);
    }
    return out;
}

int cmd_train(const CommonArgs& args) {
    cx::RunConfig cfg = resolve_config(args, true);
    LoadedData data = load_data(cfg);
    cfg.validate();
    cx::set_precision(cfg.precision);
    cx::Rng rng(cfg.seed);
    cx::Model model(cfg.model, rng);
    cx::Trainer trainer(model, data.dataset, cfg, rng);
    const std::vector<cx::EpochStats> stats = trainer.run();
    if (!stats.empty()) {
        std::printf("trained %zu epochs, final mean loss %.6f\n", stats.size(),
                    stats.back().mean_loss);
    } else {
        std::printf("nothing to do: train.epochs=0\n");
    }
    return 0;
}

int cmd_decode(const CommonArgs& args, const std::string& ckpt_path,
               const std::string& out_path, const std::string& ref_out, int beam_flag) {
    cx::Checkpoint ckpt = cx::load_checkpoint(ckpt_path);
    cx::RunConfig cfg;
    if (!args.config_path.empty()) {
        cfg = cx::load_config(args.config_path);
    } else {
        cfg = cx::parse_config(ckpt.config_text);  // fall back to the stored echo
    }
    for (const std::string& kv : args.overrides) cx::apply_override(cfg, kv);
    if (beam_flag > 0) cfg.decode.beam = beam_flag;
    LoadedData data = load_data(cfg);
    cfg.validate();
    cx::set_precision(cfg.precision);
    cx::Rng rng(cfg.seed);
    cx::Model model(cfg.model, rng);
    cx::apply_checkpoint(ckpt, model);

    std::ofstream out(out_path);
    if (!out) throw cx::InputError("cannot write hypothesis file '" + out_path + "'");
    std::ofstream refs;
    if (!ref_out.empty()) {
        refs.open(ref_out);
        if (!refs) throw cx::InputError("cannot write reference file '" + ref_out + "'");
    }
    for (const cx::Utterance& u : data.dataset) {
        cx::Tensor memory = model.encode_utterance(u.features);
        const int max_len = cfg.decode.max_len > 0 ? cfg.decode.max_len
                                                   : cx::default_max_len(memory.extent(0));
        const std::vector<cx::Hypothesis> nbest =
            cx::beam_search(model, memory, cfg.decode.beam, max_len);
        out << cx::format_hypothesis(u.id, nbest.front(), data.vocab) << "\n";
        if (refs.is_open()) {
            std::vector<int> framed{cx::kBosId};
            framed.insert(framed.end(), u.tokens.begin(), u.tokens.end());
            framed.push_back(cx::kEosId);
            refs << u.id << "\t" << cx::decode(framed, data.vocab) << "\n";
        }
    }
    std::printf("decoded %zu utterances (beam %d) -> %s\n", data.dataset.size(),
                cfg.decode.beam, out_path.c_str());
    return 0;
}

std::map<std::string, std::string> read_tsv_text(const std::string& path, int text_col) {
    std::ifstream in(path);
    if (!in) throw cx::InputError("cannot open '" + path + "'");
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream row(line);
        std::string col;
        while (std::getline(row, col, '\t')) cols.push_back(col);
        if (static_cast<int>(cols.size()) <= text_col) {
            throw cx::InputError("'" + path + "': malformed record '" + line + "'");
        }
        out[cols[0]] = cols[static_cast<std::size_t>(text_col)];
    }
    return out;
}

int cmd_score(const std::vector<std::string>& ref_paths,
              const std::vector<std::string>& hyp_paths) {
    if (ref_paths.size() != hyp_paths.size() || ref_paths.empty()) {
        throw cx::InputError("score needs matching --ref/--hyp pairs");
    }
    long total_s = 0, total_i = 0, total_d = 0, total_ref = 0;
    for (std::size_t k = 0; k < ref_paths.size(); ++k) {
        const auto refs = read_tsv_text(ref_paths[k], 1);   // id \t text
        const auto hyps = read_tsv_text(hyp_paths[k], 2);   // id \t score \t text
        long s = 0, ins = 0, d = 0, rlen = 0;
        for (const auto& [id, ref_text] : refs) {
            auto it = hyps.find(id);
            if (it == hyps.end()) {
                throw cx::InputError("no hypothesis for utterance '" + id + "' in '" +
                                     hyp_paths[k] + "'");
            }
            const cx::WerBreakdown w =
                cx::wer(cx::split_words(ref_text), cx::split_words(it->second));
            s += w.substitutions;
            ins += w.insertions;
            d += w.deletions;
            rlen += w.ref_len;
        }
        const double rate = rlen > 0 ? static_cast<double>(s + ins + d) / rlen : 0.0;
        std::printf("set %zu: S=%ld I=%ld D=%ld ref=%ld wer=%.2f%%\n", k + 1, s, ins, d,
                    rlen, 100.0 * rate);
        total_s += s;
        total_i += ins;
        total_d += d;
        total_ref += rlen;
    }
    const double rate =
        total_ref > 0 ? static_cast<double>(total_s + total_i + total_d) / total_ref : 0.0;
    std::printf("aggregate: S=%ld I=%ld D=%ld ref=%ld wer=%.2f%%\n", total_s, total_i,
                total_d, total_ref, 100.0 * rate);
    return 0;
}

int cmd_average(const std::string& dir, const std::string& out_path, int last_n) {
    const auto found = cx::list_checkpoints(dir);
    if (found.empty()) throw cx::InputError("no checkpoints in '" + dir + "'");
    const int n = std::min<int>(last_n, static_cast<int>(found.size()));
    std::vector<cx::Checkpoint> set;
    std::string prov = "average of " + std::to_string(n) + " checkpoints:";
    for (std::size_t i = found.size() - static_cast<std::size_t>(n); i < found.size(); ++i) {
        set.push_back(cx::load_checkpoint(found[i].second));
        prov += "\n  " + found[i].second;
    }
    cx::Checkpoint avg = cx::average_checkpoints(set);
    avg.provenance = prov;
    cx::save_checkpoint(out_path, avg);
    std::printf("averaged %d checkpoints -> %s\n", n, out_path.c_str());
    return 0;
}

int cmd_info(const CommonArgs& args, const std::string& preset_name) {
    cx::ModelConfig mc;
    if (!preset_name.empty()) {
        mc = cx::preset(preset_name);
        cx::RunConfig tmp;
        tmp.model = mc;
        CommonArgs rest = args;
        rest.config_path.clear();
        for (const std::string& kv : args.overrides) cx::apply_override(tmp, kv);
        mc = tmp.model;
    } else {
        mc = resolve_config(args, true).model;
    }
    const cx::ParamCount pc = cx::count_params(mc);
    std::printf("%-24s %16s\n", "component", "parameters");
    for (const auto& [name, n] : pc.by_component) {
        std::printf("%-24s %16lld\n", name.c_str(), static_cast<long long>(n));
    }
    std::printf("%-24s %16lld\n", "total", static_cast<long long>(pc.total));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"convolutional-context transformer speech recognition"};
    app.require_subcommand(1);

    CommonArgs train_args, decode_args, info_args;
    std::string ckpt_path, hyp_out = "hyps.tsv", ref_out;
    int beam_flag = 0;
    std::vector<std::string> ref_paths, hyp_paths;
    std::string avg_dir, avg_out = "average.ckpt";
    int last_n = 30;
    std::string preset_name;

    CLI::App* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--config", train_args.config_path, "run config file")->required();
    train->add_option("overrides", train_args.overrides, "key=value overrides");

    CLI::App* dec = app.add_subcommand("decode", "beam-decode a dataset");
    dec->add_option("--checkpoint", ckpt_path, "checkpoint to decode with")->required();
    dec->add_option("--config", decode_args.config_path,
                    "run config (default: the checkpoint's stored config)");
    dec->add_option("--out", hyp_out, "hypothesis output file");
    dec->add_option("--ref-out", ref_out, "also dump references for scoring");
    dec->add_option("--beam", beam_flag, "beam width (overrides config)");
    dec->add_option("overrides", decode_args.overrides, "key=value overrides");

    CLI::App* score = app.add_subcommand("score", "word error rate of hyp vs ref");
    score->add_option("--ref", ref_paths, "reference file (id<TAB>text)")->required();
    score->add_option("--hyp", hyp_paths, "hypothesis file (id<TAB>score<TAB>text)")
        ->required();

    CLI::App* avg = app.add_subcommand("average", "average trailing checkpoints");
    avg->add_option("--dir", avg_dir, "checkpoint directory")->required();
    avg->add_option("--out", avg_out, "output checkpoint");
    avg->add_option("--last-n", last_n, "how many trailing checkpoints (default 30)");

    CLI::App* info = app.add_subcommand("info", "parameter-count table for a config");
    info->add_option("--config", info_args.config_path, "run config file");
    info->add_option("--preset", preset_name, "canonical, best, or toy");
    info->add_option("overrides", info_args.overrides, "key=value overrides");

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(train_args);
        if (dec->parsed()) return cmd_decode(decode_args, ckpt_path, hyp_out, ref_out, beam_flag);
        if (score->parsed()) return cmd_score(ref_paths, hyp_paths);
        if (avg->parsed()) return cmd_average(avg_dir, avg_out, last_n);
        if (info->parsed()) return cmd_info(info_args, preset_name);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const cx::NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 2;
    } catch (const cx::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
