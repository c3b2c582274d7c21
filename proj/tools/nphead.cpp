// nphead: command-line front end for the headline summarization workbench.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nphead/checkpoint.hpp"
#include "nphead/corpus.hpp"
#include "nphead/evalsvc.hpp"
#include "nphead/evalsvc_http.hpp"
#include "nphead/model.hpp"
#include "nphead/rouge.hpp"
#include "nphead/runconfig.hpp"
#include "nphead/tokenizer.hpp"
#include "nphead/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nphead;

namespace {

std::array<double, 3> parse_ratios(const std::string& s) {
    std::array<double, 3> r{};
    std::stringstream ss(s);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i >= 3) throw ConfigError("--ratios needs exactly three values");
        try {
            r[i++] = std::stod(part);
        } catch (const std::exception&) {
            throw ConfigError("bad ratio '" + part + "'");
        }
    }
    if (i != 3) throw ConfigError("--ratios needs exactly three values");
    return r;
}

std::vector<corpus::ArticleRecord> split_records(const std::vector<corpus::ArticleRecord>& recs,
                                                 const corpus::SplitManifest& m, const std::string& which) {
    if (which == "train") return corpus::select(recs, m.train_ids);
    if (which == "val") return corpus::select(recs, m.val_ids);
    if (which == "test") return corpus::select(recs, m.test_ids);
    throw ConfigError("unknown split '" + which + "' (expected train, val or test)");
}

std::string group_thousands(std::size_t n) {
    std::string s = std::to_string(n);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return s;
}

// A JSON object whose values are all non-negative integers is a category
// count table; anything else is read as a line-delimited corpus.
std::optional<std::vector<std::pair<std::string, std::size_t>>> read_count_table(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw NotFoundError("cannot read " + p.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception&) {
        return std::nullopt;
    }
    if (!j.is_object() || j.empty()) return std::nullopt;
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number_unsigned()) return std::nullopt;
        out.emplace_back(k, v.get<std::size_t>());
    }
    return out;
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

fs::path new_run_dir(const fs::path& runs_root, const std::string& name) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%S", &tm);
    for (int k = 0;; ++k) {
        fs::path p = runs_root / (name + "-" + stamp + (k ? "-" + std::to_string(k) : ""));
        fs::create_directories(runs_root);
        if (fs::create_directory(p)) return p;
    }
}

std::atomic<evalsvc::EvalServer*> g_server{nullptr};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nphead: Nepali news headline summarization workbench"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic Devanagari corpus (JSON lines)");
    std::size_t synth_n = 100;
    std::uint64_t synth_seed = 1;
    std::string synth_out, synth_counts;
    std::size_t synth_lexicon = 400;
    synth->add_option("--n", synth_n, "Number of articles")->capture_default_str();
    synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output corpus file")->required();
    synth->add_option("--category-counts", synth_counts, "'reference' to reproduce the original category distribution");
    synth->add_option("--lexicon-size", synth_lexicon, "Pseudo-word lexicon size")->capture_default_str();

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Clean, validate and deduplicate a raw corpus");
    std::string ingest_in, ingest_out, ingest_report;
    corpus::CleaningConfig clean_cfg;
    std::string punctuation;
    ingest->add_option("--in", ingest_in, "Raw JSON-lines corpus")->required();
    ingest->add_option("--out", ingest_out, "Cleaned corpus output")->required();
    ingest->add_option("--report", ingest_report, "Write the ingest report (JSON) here");
    ingest->add_flag("--strict", clean_cfg.strict, "Fail on the first malformed line");
    ingest->add_option("--threads", clean_cfg.threads, "Cleaning threads")->capture_default_str();
    ingest->add_option("--punctuation", punctuation, "Punctuation characters kept besides Devanagari");

    // split
    auto* split = app.add_subcommand("split", "Seeded train/validation/test split");
    std::string split_corpus, split_out, split_ratios = "0.70,0.20,0.10";
    std::uint64_t split_seed = 0;
    std::size_t split_n_check = 0;
    split->add_option("--corpus", split_corpus, "Cleaned corpus");
    split->add_option("--out", split_out, "Manifest output (JSON)");
    split->add_option("--ratios", split_ratios, "train,val,test ratios")->capture_default_str();
    split->add_option("--seed", split_seed, "Shuffle seed")->capture_default_str();
    split->add_option("--n-check", split_n_check, "Only print the split sizes for N records");

    // stats
    auto* stats = app.add_subcommand("stats", "Articles per category");
    std::string stats_corpus;
    bool stats_json = false;
    stats->add_option("--corpus", stats_corpus, "Corpus file or category count table")->required();
    stats->add_flag("--json", stats_json, "Print JSON instead of a table");

    // train-tokenizer
    auto* trtok = app.add_subcommand("train-tokenizer", "Train the subword tokenizer on the training split");
    std::string tok_corpus, tok_manifest, tok_out, tok_prefix = tok::kDefaultPrefix;
    std::size_t tok_vocab = 500;
    trtok->add_option("--corpus", tok_corpus, "Cleaned corpus")->required();
    trtok->add_option("--manifest", tok_manifest, "Split manifest (train ids only are used)");
    trtok->add_option("--vocab-size", tok_vocab, "Vocabulary size including special tokens")->capture_default_str();
    trtok->add_option("--prefix", tok_prefix, "Task prefix prepended to every source")->capture_default_str();
    trtok->add_option("--out", tok_out, "Tokenizer output (JSON)")->required();

    // finetune
    auto* ft = app.add_subcommand("finetune", "Fine-tune LoRA adapters on a frozen base");
    std::string ft_config = "toy", ft_corpus, ft_manifest, ft_tokenizer, ft_runs = "runs", ft_quant;
    std::optional<double> ft_lr, ft_wd;
    std::optional<std::size_t> ft_bs, ft_epochs, ft_steps, ft_src, ft_rank;
    std::optional<std::uint64_t> ft_seed;
    ft->add_option("--config", ft_config, "'toy', 'full' or a JSON config file")->capture_default_str();
    ft->add_option("--corpus", ft_corpus, "Cleaned corpus")->required();
    ft->add_option("--manifest", ft_manifest, "Split manifest")->required();
    ft->add_option("--tokenizer", ft_tokenizer, "Trained tokenizer")->required();
    ft->add_option("--runs-dir", ft_runs, "Parent directory for run directories")->capture_default_str();
    ft->add_option("--lr", ft_lr, "Override learning rate");
    ft->add_option("--weight-decay", ft_wd, "Override weight decay");
    ft->add_option("--batch-size", ft_bs, "Override batch size");
    ft->add_option("--epochs", ft_epochs, "Override epoch count");
    ft->add_option("--max-steps", ft_steps, "Cap total optimizer steps");
    ft->add_option("--max-source-len", ft_src, "Override source truncation length");
    ft->add_option("--seed", ft_seed, "Override training seed");
    ft->add_option("--lora-r", ft_rank, "Override adapter rank");
    ft->add_option("--quant", ft_quant, "Base weight quantization: none, int8, int4, nf4");

    // generate
    auto* gen = app.add_subcommand("generate", "Generate headlines with a fine-tuned checkpoint");
    std::string gen_ckpt, gen_tok, gen_text, gen_corpus, gen_manifest, gen_split = "test", gen_out;
    std::size_t gen_beam = 0, gen_max_len = tok::kMaxTargetLen, gen_src = tok::kMaxSourceLen;
    gen->add_option("--checkpoint", gen_ckpt, "Adapter checkpoint")->required();
    gen->add_option("--tokenizer", gen_tok, "Tokenizer the checkpoint was trained with")->required();
    gen->add_option("--text", gen_text, "Article body to summarize");
    gen->add_option("--corpus", gen_corpus, "Corpus to summarize");
    gen->add_option("--manifest", gen_manifest, "Restrict to one split of this manifest");
    gen->add_option("--split", gen_split, "train, val or test")->capture_default_str();
    gen->add_option("--beam", gen_beam, "Beam size (0 = greedy)")->capture_default_str();
    gen->add_option("--max-len", gen_max_len, "Maximum generated tokens")->capture_default_str();
    gen->add_option("--max-source-len", gen_src, "Source truncation length")->capture_default_str();
    gen->add_option("--out", gen_out, "Write predictions (JSON lines) here");

    // score
    auto* score = app.add_subcommand("score", "ROUGE of a checkpoint against reference headlines");
    std::string sc_ckpt, sc_tok, sc_corpus, sc_manifest, sc_split = "test", sc_out, sc_pred;
    bool sc_no_baseline = false;
    std::optional<std::size_t> sc_src;
    score->add_option("--checkpoint", sc_ckpt, "Adapter checkpoint");
    score->add_option("--tokenizer", sc_tok, "Tokenizer the checkpoint was trained with");
    score->add_option("--corpus", sc_corpus, "Cleaned corpus");
    score->add_option("--manifest", sc_manifest, "Split manifest");
    score->add_option("--split", sc_split, "train, val or test")->capture_default_str();
    score->add_option("--predictions", sc_pred, "Score a JSON-lines file of {candidate, reference} instead");
    score->add_option("--max-source-len", sc_src, "Source truncation length (default: the checkpoint's)");
    score->add_flag("--no-baseline", sc_no_baseline, "Skip the untrained-adapter row");
    score->add_option("--out", sc_out, "Write the report (JSON) here; the table goes next to it as .txt");

    // serve-eval
    auto* serve = app.add_subcommand("serve-eval", "Run the blinded human-evaluation service");
    std::string sv_store = "eval-store", sv_host = "127.0.0.1";
    int sv_port = 8080;
    serve->add_option("--store", sv_store, "Session and vote-log directory")->capture_default_str();
    serve->add_option("--host", sv_host, "Bind address")->capture_default_str();
    serve->add_option("--port", sv_port, "Port (0 = any free port)")->capture_default_str();

    // aggregate
    auto* agg = app.add_subcommand("aggregate", "Vote counts and percentages");
    std::string ag_store = "eval-store", ag_session, ag_counts, ag_models;
    bool ag_json = false;
    agg->add_option("--store", ag_store, "Session and vote-log directory")->capture_default_str();
    agg->add_option("--session", ag_session, "Session id");
    agg->add_option("--counts", ag_counts, "Comma-separated vote counts (no session needed)");
    agg->add_option("--models", ag_models, "Comma-separated model names for --counts");
    agg->add_flag("--json", ag_json, "Print JSON instead of a table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*synth) {
            corpus::SyntheticOptions opt;
            opt.lexicon_size = synth_lexicon;
            if (synth_counts == "reference") {
                opt.category_counts = corpus::reference_category_counts();
                synth_n = 0;
                for (const auto& [c, n] : opt.category_counts) synth_n += n;
            } else if (!synth_counts.empty()) {
                throw ConfigError("--category-counts accepts only 'reference'");
            }
            const auto recs = corpus::make_synthetic_corpus(synth_n, synth_seed, opt);
            corpus::write_records(synth_out, recs);
            std::cout << "wrote " << recs.size() << " articles to " << synth_out << "\n";
        } else if (*ingest) {
            if (!punctuation.empty()) clean_cfg.punctuation = utf8::decode(punctuation);
            corpus::IngestReport rep;
            const auto recs = corpus::ingest(ingest_in, clean_cfg, rep);
            corpus::write_records(ingest_out, recs);
            const auto rj = corpus::to_json(rep);
            if (!ingest_report.empty()) write_text(ingest_report, rj.dump(2) + "\n");
            std::cout << "read " << rep.read << ", kept " << rep.kept << ", empty " << rep.dropped_empty
                      << ", duplicate " << rep.dropped_duplicate_id << ", malformed " << rep.malformed.size() << "\n";
        } else if (*split) {
            const auto ratios = parse_ratios(split_ratios);
            corpus::validate_ratios(ratios);
            if (split_n_check) {
                const auto s = corpus::split_sizes(split_n_check, ratios);
                std::cout << s.train << "/" << s.val << "/" << s.test << "\n";
            } else {
                if (split_corpus.empty() || split_out.empty()) throw ConfigError("split needs --corpus and --out");
                const auto m = corpus::split_dataset(corpus::load_records(split_corpus), ratios, split_seed);
                corpus::save_manifest(split_out, m);
                std::cout << m.train_ids.size() << "/" << m.val_ids.size() << "/" << m.test_ids.size() << "\n";
            }
        } else if (*stats) {
            std::vector<std::pair<std::string, std::size_t>> rows;
            if (auto table = read_count_table(stats_corpus)) {
                rows = *table;
            } else {
                const auto s = corpus::category_stats(corpus::load_records(stats_corpus));
                rows.assign(s.counts.begin(), s.counts.end());
            }
            std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
            std::size_t total = 0;
            for (const auto& r : rows) total += r.second;
            if (stats_json) {
                json j = {{"categories", json::array()}, {"total", total}};
                for (const auto& [c, n] : rows) j["categories"].push_back({{"category", c}, {"count", n}});
                std::cout << j.dump(2) << "\n";
            } else {
                std::size_t w = 8;
                for (const auto& r : rows) w = std::max(w, r.first.size());
                for (const auto& [c, n] : rows) {
                    std::cout << c << std::string(w - c.size() + 2, ' ') << group_thousands(n) << "\n";
                }
                std::cout << "Total" << std::string(w - 3, ' ') << group_thousands(total) << "\n";
            }
        } else if (*trtok) {
            auto recs = corpus::load_records(tok_corpus);
            if (!tok_manifest.empty()) recs = corpus::select(recs, corpus::load_manifest(tok_manifest).train_ids);
            std::vector<std::string> texts;
            for (const auto& r : recs) {
                texts.push_back(r.body);
                texts.push_back(r.headline);
            }
            const auto tk = tok::SubwordTokenizer::train(texts, tok_vocab, tok_prefix);
            tk.save(tok_out);
            std::cout << "vocab " << tk.vocab_size() << ", fingerprint " << tk.fingerprint() << "\n";
        } else if (*ft) {
            RunConfig rc = load_run_config(ft_config);
            if (ft_lr) rc.train.learning_rate = *ft_lr;
            if (ft_wd) rc.train.weight_decay = *ft_wd;
            if (ft_bs) rc.train.batch_size = *ft_bs;
            if (ft_epochs) rc.train.epochs = *ft_epochs;
            if (ft_steps) rc.train.max_steps = *ft_steps;
            if (ft_src) rc.train.max_source_len = *ft_src;
            if (ft_seed) rc.train.seed = *ft_seed;
            if (ft_rank) rc.lora.r = *ft_rank;
            if (!ft_quant.empty()) {
                rc.model.quant = ft_quant == "none" ? std::nullopt : std::optional(quant::scheme_from_string(ft_quant));
            }
            const auto tk = tok::SubwordTokenizer::load(ft_tokenizer);
            rc.model.vocab_size = tk.vocab_size();
            rc.tokenizer_vocab_size = tk.vocab_size();
            rc.validate();

            const auto recs = corpus::load_records(ft_corpus);
            const auto manifest = corpus::load_manifest(ft_manifest);
            const auto train_split = corpus::select(recs, manifest.train_ids);
            const auto val_split = corpus::select(recs, manifest.val_ids);

            const auto run_dir = new_run_dir(ft_runs, rc.name);
            const json effective = to_json(rc);
            write_text(run_dir / "config.json", effective.dump(2) + "\n");
            {
                std::ofstream log(run_dir / "run_log.jsonl");
                log << json{{"event", "config"}, {"config", effective}, {"tokenizer", tk.fingerprint()}}.dump() << "\n";
            }
            model::Seq2SeqModel<float> m(rc.model);
            m.attach_adapters(rc.lora, rc.adapter_seed);
            std::cout << "run directory " << run_dir.string() << "\n"
                      << "trainable parameters " << m.trainable_parameter_count() << " of "
                      << m.trainable_parameter_count() + model::base_parameter_count(rc.model) << "\n";
            train::FinetuneOptions opt;
            opt.run_dir = run_dir;
            opt.on_epoch = [](const train::EpochReport& r) {
                std::printf("epoch %zu  loss %.4f  val R1 %.4f R2 %.4f RL %.4f  %.1fs\n", r.epoch, r.mean_train_loss,
                            r.validation.rouge1.f1, r.validation.rouge2.f1, r.validation.rougeL.f1, r.seconds);
                std::fflush(stdout);
            };
            const auto res = train::finetune(m, tk, train_split, val_split, rc.train, opt);
            json epochs = json::array();
            for (const auto& e : res.epochs) epochs.push_back(train::to_json(e));
            write_text(run_dir / "epochs.json", epochs.dump(2) + "\n");
            std::cout << "final checkpoint " << res.final_checkpoint << "\n";
        } else if (*gen) {
            const auto tk = tok::SubwordTokenizer::load(gen_tok);
            const auto m = ckpt::restore<float>(ckpt::load(gen_ckpt), tk.fingerprint());
            model::GenerationConfig gc;
            gc.max_len = gen_max_len;
            if (gen_beam) {
                gc.strategy = model::Strategy::Beam;
                gc.beam_size = gen_beam;
            }
            std::vector<corpus::ArticleRecord> recs;
            if (!gen_text.empty()) {
                recs.push_back({"text", "cli", "", "", corpus::clean_text(gen_text), std::nullopt, std::nullopt});
            } else if (!gen_corpus.empty()) {
                recs = corpus::load_records(gen_corpus);
                if (!gen_manifest.empty()) recs = split_records(recs, corpus::load_manifest(gen_manifest), gen_split);
            } else {
                throw ConfigError("generate needs --text or --corpus");
            }
            const auto preds = train::predict(m, tk, recs, gc, gen_src);
            std::ofstream out;
            if (!gen_out.empty()) out.open(gen_out, std::ios::trunc);
            for (const auto& p : preds) {
                const json line = {{"id", p.id}, {"candidate", p.text}, {"reference", p.reference}};
                if (out.is_open()) out << line.dump() << "\n";
                else std::cout << (gen_text.empty() ? line.dump() : p.text) << "\n";
            }
        } else if (*score) {
            std::vector<std::pair<std::string, rouge::RougeReport>> rows;
            if (!sc_pred.empty()) {
                std::ifstream in(sc_pred);
                if (!in) throw NotFoundError("cannot read " + sc_pred);
                std::vector<std::pair<std::string, std::string>> pairs;
                std::string line;
                while (std::getline(in, line)) {
                    if (line.empty()) continue;
                    const auto j = json::parse(line);
                    pairs.emplace_back(j.at("candidate").get<std::string>(), j.at("reference").get<std::string>());
                }
                rows.emplace_back("predictions", rouge::corpus_rouge(pairs));
            } else {
                if (sc_ckpt.empty() || sc_tok.empty() || sc_corpus.empty() || sc_manifest.empty()) {
                    throw ConfigError("score needs --checkpoint, --tokenizer, --corpus and --manifest (or --predictions)");
                }
                const auto tk = tok::SubwordTokenizer::load(sc_tok);
                const auto c = ckpt::load(sc_ckpt);
                auto m = ckpt::restore<float>(c, tk.fingerprint());
                std::size_t src = tok::kMaxSourceLen;
                if (c.header.contains("extra") && c.header["extra"].contains("train")) {
                    src = c.header["extra"]["train"].value("max_source_len", src);
                }
                if (sc_src) src = *sc_src;
                const auto recs = split_records(corpus::load_records(sc_corpus), corpus::load_manifest(sc_manifest), sc_split);
                if (recs.empty()) throw ValidationError("split '" + sc_split + "' is empty");
                if (!sc_no_baseline) {
                    model::Seq2SeqModel<float> base(m.config());
                    base.attach_adapters(*m.lora_config(), 0);
                    rows.emplace_back("untrained", train::evaluate(base, tk, recs, src));
                }
                rows.emplace_back("lora (epoch " + std::to_string(c.header.value("epoch", 0)) + ")",
                                  train::evaluate(m, tk, recs, src));
            }
            const auto table = rouge::format_table(rows);
            std::cout << table;
            if (!sc_out.empty()) {
                json j = json::array();
                for (const auto& [name, rep] : rows) j.push_back({{"model", name}, {"report", rouge::to_json(rep)}});
                write_text(sc_out, j.dump(2) + "\n");
                write_text(fs::path(sc_out).replace_extension(".txt"), table);
            }
        } else if (*serve) {
            const char* secret = std::getenv("NPHEAD_ADMIN_SECRET");
            if (!secret || !*secret) throw ConfigError("set NPHEAD_ADMIN_SECRET before starting serve-eval");
            evalsvc::SessionStore store(sv_store);
            evalsvc::EvalServer server(store, secret);
            int port = sv_port;
            if (sv_port == 0) {
                port = server.bind_any(sv_host);
                if (port <= 0) throw std::runtime_error("cannot bind " + sv_host);
            } else if (!server.bind(sv_host, sv_port)) {
                throw std::runtime_error("cannot bind " + sv_host + ":" + std::to_string(sv_port));
            }
            g_server = &server;
            std::signal(SIGINT, [](int) {
                if (auto* s = g_server.load()) s->stop();
            });
            std::signal(SIGTERM, [](int) {
                if (auto* s = g_server.load()) s->stop();
            });
            std::cout << "listening on http://" << sv_host << ":" << port << "\n" << std::flush;
            server.run();
            g_server = nullptr;
        } else if (*agg) {
            evalsvc::Aggregate a;
            if (!ag_counts.empty()) {
                std::vector<std::size_t> counts;
                std::stringstream ss(ag_counts);
                std::string part;
                while (std::getline(ss, part, ',')) {
                    try {
                        counts.push_back(static_cast<std::size_t>(std::stoull(part)));
                    } catch (const std::exception&) {
                        throw ValidationError("bad count '" + part + "'");
                    }
                }
                std::vector<std::string> models;
                if (!ag_models.empty()) {
                    std::stringstream ms(ag_models);
                    while (std::getline(ms, part, ',')) models.push_back(part);
                } else {
                    for (std::size_t i = 0; i < counts.size(); ++i) models.push_back("model-" + std::to_string(i + 1));
                }
                if (models.size() != counts.size()) throw ValidationError("--models and --counts differ in length");
                a = evalsvc::aggregate_counts(models, counts);
            } else {
                if (ag_session.empty()) throw ConfigError("aggregate needs --session or --counts");
                evalsvc::SessionStore store(ag_store);
                a = store.aggregate(ag_session);
            }
            if (ag_json) {
                std::cout << evalsvc::to_json(a).dump(2) << "\n";
            } else {
                std::size_t w = 5;
                for (const auto& m : a.models) w = std::max(w, m.size());
                for (std::size_t i = 0; i < a.models.size(); ++i) {
                    std::printf("%-*s  %6zu  %6s\n", static_cast<int>(w), a.models[i].c_str(), a.counts[i],
                                a.percentage(i).c_str());
                }
                std::printf("%-*s  %6zu\n", static_cast<int>(w), "Total", a.total);
            }
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NotFoundError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IngestError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
