// ctrlkit command-line entry point.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctrlkit/ctrlkit.hpp"

namespace fs = std::filesystem;
using namespace ctrlkit;

namespace {

const std::vector<std::string> kVerbs = {"train-tokenizer", "train",        "generate",     "grid",
                                         "perplexity",      "index-build",  "index-search", "index-overlap",
                                         "finetune",        "eval-task"};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
};

const std::string kModelFile = "model.ckpt";
const std::string kVocabFile = "vocab.txt";

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw std::invalid_argument(what + " path is required");
  if (!fs::exists(path)) throw std::invalid_argument(what + " not found: " + path);
}

void require_out(const Globals& g) {
  if (g.out.empty()) throw std::invalid_argument("--out is required");
}

struct LoadedModel {
  Checkpoint ck;
  Vocab vocab;
};

/// A model directory holds model.ckpt and vocab.txt.
LoadedModel load_model_dir(const std::string& dir) {
  require_file(dir, "model directory");
  require_file((fs::path(dir) / kModelFile).string(), "checkpoint");
  require_file((fs::path(dir) / kVocabFile).string(), "vocabulary");
  LoadedModel m{load_checkpoint((fs::path(dir) / kModelFile).string()), load_vocab((fs::path(dir) / kVocabFile).string())};
  if (m.vocab.size() != m.ck.config.vocab_size)
    throw std::invalid_argument("model directory " + dir + ": vocabulary and checkpoint sizes differ");
  return m;
}

void save_model_dir(const fs::path& dir, const Checkpoint& ck, const Vocab& v) {
  fs::create_directories(dir);
  save_checkpoint((dir / kModelFile).string(), ck);
  save_vocab((dir / kVocabFile).string(), v);
}

std::string epoch_dir_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt-epoch%02zu", epoch);
  return buf;
}

/// Output sink: a file when a path is given, stdout otherwise.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
      file_.open(path, std::ios::binary);
      if (!file_) throw std::runtime_error("cannot write " + path);
    }
  }
  std::ostream& get() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

/// One text per line, with \n, \t and \\ escaped.
std::vector<std::string> read_text_lines(const std::string& path) {
  require_file(path, "text file");
  std::ifstream in(path, std::ios::binary);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(text::unescape(line));
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  for (const auto& s : text::split(csv, ',')) out.push_back(std::stod(s));
  return out;
}

SamplingParams sampling_from_options(const std::string& preset, std::optional<double> t, std::optional<double> p,
                                     std::optional<double> r) {
  SamplingParams sp;
  if (!preset.empty()) {
    auto pr = parse_preset(preset);
    if (!pr) throw std::invalid_argument("unknown preset " + preset + " (expected M1, M2 or M3)");
    sp = preset_params(*pr);
  }
  if (t) sp.temperature = *t;
  if (p) sp.top_p = *p;
  if (r) sp.repetition_penalty = *r;
  sp.validate();
  return sp;
}

std::string usage() {
  std::string s = "usage: ctrlkit [--seed N] [--jobs N] [--out PATH] <verb> [options]\nverbs:";
  for (const auto& v : kVerbs) s += " " + v;
  return s + "\n(also: index build|search|overlap)\nrun `ctrlkit <verb> --help` for verb options\n";
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  // `index build` is an alias of `index-build`, and so on.
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "index" && (args[i + 1] == "build" || args[i + 1] == "search" || args[i + 1] == "overlap")) {
      args[i] = "index-" + args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i + 1));
      break;
    }
  }
  // First non-option word must be a known verb.
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a == "--seed" || a == "--jobs" || a == "--out") {
      ++i;
      continue;
    }
    if (a == "-h" || a == "--help") break;
    if (!a.empty() && a[0] == '-') continue;
    if (std::find(kVerbs.begin(), kVerbs.end(), a) == kVerbs.end()) {
      std::cerr << "error: unknown verb '" << a << "'\n" << usage();
      return 2;
    }
    break;
  }

  CLI::App app{"ctrlkit: control-code language model toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for all randomness");
  app.add_option("--jobs", g.jobs, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output path");

  auto verb = [&](const std::string& name, const std::string& desc) {
    auto* s = app.add_subcommand(name, desc);
    s->fallthrough();
    return s;
  };

  // train-tokenizer
  std::string corpus_path, vocab_path;
  std::size_t vocab_size = 1000;
  double fraction = 1.0;
  auto* tok = verb("train-tokenizer", "Train a BPE vocabulary and append control codes");
  tok->add_option("--corpus", corpus_path, "Corpus file")->required();
  tok->add_option("--vocab-size", vocab_size, "Base vocabulary size before control codes");
  tok->add_option("--fraction", fraction, "Fraction of documents used for training");

  // train
  ModelConfig mc;
  std::string train_config_path, init_dir;
  std::optional<std::size_t> epochs_opt;
  auto* tr = verb("train", "Train a model from scratch (or continue from --init)");
  tr->add_option("--corpus", corpus_path, "Corpus file")->required();
  tr->add_option("--vocab", vocab_path, "Vocabulary file");
  tr->add_option("--init", init_dir, "Model directory to continue from");
  tr->add_option("--config", train_config_path, "key=value training config");
  tr->add_option("--layers", mc.layers);
  tr->add_option("--heads", mc.heads);
  tr->add_option("--model-dim", mc.model_dim);
  tr->add_option("--inner-dim", mc.inner_dim);
  tr->add_option("--context", mc.context);
  tr->add_option("--epochs", epochs_opt);

  // generate
  std::string model_dir, occ, prompt, preset;
  std::optional<double> temperature, top_p, penalty;
  std::size_t max_tokens = 256, count = 1;
  auto* gen = verb("generate", "Sample texts conditioned on a control code");
  gen->add_option("--model", model_dir, "Model directory")->required();
  gen->add_option("--occ", occ, "Category whose opening code starts the text")->required();
  gen->add_option("--prompt", prompt, "Text following the control code");
  gen->add_option("--preset", preset, "M1, M2 or M3");
  gen->add_option("--temperature", temperature);
  gen->add_option("--top-p", top_p);
  gen->add_option("--penalty", penalty, "Repetition penalty r");
  gen->add_option("--max-tokens", max_tokens);
  gen->add_option("--count", count, "Number of texts (text i uses seed + i)");

  // grid
  std::string categories, index_path, p_values, t_values, r_values;
  std::size_t texts_per_cell = 10;
  auto* grid = verb("grid", "Sampling hyper-parameter grid search");
  grid->add_option("--model", model_dir, "Model directory")->required();
  grid->add_option("--categories", categories, "Comma-separated categories")->required();
  grid->add_option("--texts", texts_per_cell, "Texts per cell");
  grid->add_option("--max-tokens", max_tokens);
  grid->add_option("--index", index_path, "k-gram index for the overlap column");
  grid->add_option("--p-values", p_values, "Comma-separated nucleus thresholds");
  grid->add_option("--t-values", t_values, "Comma-separated temperatures");
  grid->add_option("--r-values", r_values, "Comma-separated repetition penalties");

  // perplexity
  std::string texts_path;
  std::size_t window = 0;
  auto* ppl = verb("perplexity", "Sliding-window perplexity of texts (one per line)");
  ppl->add_option("--model", model_dir, "Model directory")->required();
  ppl->add_option("--texts", texts_path, "Text file, one escaped text per line")->required();
  ppl->add_option("--window", window, "Window size w (default: model context)");
  ppl->add_option("--occ", occ, "Prepend this category's opening code");

  // index verbs
  std::size_t k = 13;
  std::string query, eval_path, thresholds = "1,10,100";
  auto* ib = verb("index-build", "Build a word k-gram index of a corpus");
  ib->add_option("--corpus", corpus_path, "Corpus file")->required();
  ib->add_option("--k", k, "k-gram length");
  auto* is = verb("index-search", "Find indexed k-grams containing a phrase");
  is->add_option("--idx", index_path, "Index file")->required();
  is->add_option("--query", query, "Phrase")->required();
  auto* io = verb("index-overlap", "Overlap of evaluation texts with the indexed corpus");
  io->add_option("--idx", index_path, "Index file")->required();
  io->add_option("--eval", eval_path, "Evaluation texts, one escaped text per line")->required();
  io->add_option("--threshold", thresholds, "Comma-separated frequency thresholds F");
  bool count_types = false;
  io->add_flag("--types", count_types, "Count distinct evaluation k-grams instead of occurrences");

  // finetune / eval-task
  std::string task_name, data_path, epoch_label = "base";
  bool baseline = false;
  auto* ft = verb("finetune", "Fine-tune all weights on a benchmark task");
  ft->add_option("--model", model_dir, "Model directory")->required();
  ft->add_option("--task", task_name, "Task name")->required();
  ft->add_option("--train", data_path, "Training data (JSON-lines)")->required();
  ft->add_option("--config", train_config_path, "key=value training config");
  ft->add_option("--epochs", epochs_opt);
  auto* et = verb("eval-task", "Greedy evaluation on a benchmark task test set");
  et->add_option("--model", model_dir, "Model directory (omit with --baseline)");
  et->add_option("--task", task_name, "Task name")->required();
  et->add_option("--test", data_path, "Test data (JSON-lines)")->required();
  et->add_option("--epoch", epoch_label, "Epoch label for the CSV");
  et->add_flag("--baseline", baseline, "Score the test-set majority / first-sentence baseline");

  try {
    std::vector<const char*> cargv{argv[0]};
    for (const auto& a : args) cargv.push_back(a.c_str());
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << '\n' << usage();
    return 2;
  }
  for (auto* s : app.get_subcommands()) {
    if (s->count("--help")) return 0;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    if (name == "train-tokenizer") {
      require_file(corpus_path, "corpus");
      require_out(g);
      if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("--fraction must be in (0,1]");
      const auto table = default_category_table();
      auto docs = load_corpus(corpus_path, table);
      auto v = add_control_codes(train_bpe(docs, fraction, vocab_size), table);
      save_vocab(g.out, v);
      std::cout << "vocab " << g.out << " size=" << v.size() << " base=" << v.base_size() << '\n';

    } else if (name == "train") {
      require_file(corpus_path, "corpus");
      require_out(g);
      TrainingConfig tc;
      if (!train_config_path.empty()) {
        require_file(train_config_path, "training config");
        tc = load_training_config(train_config_path);
      }
      if (epochs_opt) tc.epochs = *epochs_opt;
      if (g.seed) tc.seed = *g.seed;
      tc.validate();
      Vocab v;
      Checkpoint ck;
      if (!init_dir.empty()) {
        auto m = load_model_dir(init_dir);
        v = std::move(m.vocab);
        ck = std::move(m.ck);
      } else {
        require_file(vocab_path, "vocabulary");
        v = load_vocab(vocab_path);
        mc.vocab_size = v.size();
        mc.validate();
        ck = init_model<float>(mc, tc.seed);
      }
      auto docs = load_corpus(corpus_path, default_category_table());
      fs::create_directories(g.out);
      std::ofstream log(fs::path(g.out) / "train_log.csv", std::ios::binary);
      log << "epoch,mean_loss\n";
      train(ck, docs, v, tc, g.jobs, [&](const EpochReport& r) {
        save_model_dir(fs::path(g.out) / epoch_dir_name(r.epoch), r.checkpoint, v);
        log << r.epoch << ',' << text::fixed(r.mean_loss) << '\n';
        std::cout << "epoch " << r.epoch << " loss " << text::fixed(r.mean_loss) << '\n';
      });

    } else if (name == "generate") {
      auto sp = sampling_from_options(preset, temperature, top_p, penalty);
      sp.max_new_tokens = max_tokens;
      auto m = load_model_dir(model_dir);
      if (!m.vocab.has_category(occ)) throw std::invalid_argument("no control code for category " + occ);
      Sink sink(g.out);
      const std::uint64_t base = g.seed.value_or(0);
      for (std::size_t i = 0; i < count; ++i) {
        sp.rng_seed = base + i;
        auto r = generate(m.ck, m.vocab, prompt, occ, sp);
        std::span<const TokenId> body(r.generated_ids);
        if (r.stop_reason == StopReason::ecc_reached) body = body.first(body.size() - 1);
        nlohmann::ordered_json j;
        j["occ"] = occ;
        j["prompt"] = prompt;
        j["text"] = decode(m.vocab, body);
        j["ids"] = r.generated_ids;
        j["stop_reason"] = stop_reason_name(r.stop_reason);
        j["ecc"] = r.stop_ecc ? nlohmann::ordered_json(*m.vocab.ecc_category(*r.stop_ecc)) : nlohmann::ordered_json();
        j["params"] = {{"T", sp.temperature}, {"p", sp.top_p}, {"r", sp.repetition_penalty},
                       {"max_new_tokens", sp.max_new_tokens}, {"seed", sp.rng_seed}};
        if (auto pn = preset_name(sp)) j["params"]["preset"] = *pn;
        sink.get() << j.dump() << '\n';
      }

    } else if (name == "grid") {
      require_out(g);
      GridAxes axes;
      if (!p_values.empty()) axes.top_p = parse_doubles(p_values);
      if (!t_values.empty()) axes.temperature = parse_doubles(t_values);
      if (!r_values.empty()) axes.repetition_penalty = parse_doubles(r_values);
      auto cats = text::split(categories, ',');
      auto cells = grid_cells(cats, axes);
      auto m = load_model_dir(model_dir);
      for (const auto& c : cats)
        if (!m.vocab.has_category(c)) throw std::invalid_argument("no control code for category " + c);
      std::optional<NGramIndex> idx;
      if (!index_path.empty()) {
        require_file(index_path, "index");
        idx = load_index(index_path);
      }
      GridOptions opt;
      opt.texts_per_cell = texts_per_cell;
      opt.max_new_tokens = max_tokens;
      opt.seed = g.seed.value_or(0);
      opt.jobs = g.jobs;
      opt.index = idx ? &*idx : nullptr;
      auto report = grid_search(m.ck, m.vocab, cells, opt);
      fs::create_directories(g.out);
      std::ofstream csv(fs::path(g.out) / "report.csv", std::ios::binary);
      write_grid_csv(csv, report);
      write_grid_dump(fs::path(g.out) / "cells", report);
      std::ofstream conf(fs::path(g.out) / "ecc_confusion.csv", std::ios::binary);
      conf << "occ,ecc,count\n";
      for (const auto& [o, row] : report.confusion())
        for (const auto& [e, n] : row) conf << o << ',' << e << ',' << n << '\n';
      std::cout << "grid " << cells.size() << " cells -> " << g.out << '\n';

    } else if (name == "perplexity") {
      auto m = load_model_dir(model_dir);
      auto texts = read_text_lines(texts_path);
      const std::size_t w = window ? window : m.ck.config.context;
      std::optional<TokenId> occ_id;
      if (!occ.empty()) occ_id = m.vocab.control(occ).occ;
      std::vector<PerplexityResult> res(texts.size());
      parallel_for(texts.size(), g.jobs, [&](std::size_t i) {
        auto ids = encode(m.vocab, texts[i]);
        if (occ_id) ids.insert(ids.begin(), *occ_id);
        res[i] = sliding_perplexity(m.ck, std::span<const TokenId>(ids), w);
      });
      Sink sink(g.out);
      sink.get() << "text,tokens,window,perplexity\n";
      double log_sum = 0;
      std::size_t tokens = 0;
      for (std::size_t i = 0; i < res.size(); ++i) {
        sink.get() << i << ',' << res[i].token_count << ',' << w << ',' << text::fixed(res[i].value) << '\n';
        log_sum += std::log(res[i].value) * static_cast<double>(res[i].token_count);
        tokens += res[i].token_count;
      }
      if (tokens) sink.get() << "all," << tokens << ',' << w << ',' << text::fixed(std::exp(log_sum / static_cast<double>(tokens))) << '\n';

    } else if (name == "index-build") {
      require_file(corpus_path, "corpus");
      require_out(g);
      auto idx = build_index(load_corpus(corpus_path, default_category_table()), k);
      save_index(g.out, idx);
      std::cout << "index " << g.out << " k=" << idx.k() << " entries=" << idx.size() << '\n';

    } else if (name == "index-search") {
      require_file(index_path, "index");
      auto idx = load_index(index_path);
      Sink sink(g.out);
      sink.get() << "kgram\ttf\tdoc_id\tcategory\tprovenance\turl\n";
      for (const auto& h : search(idx, query))
        sink.get() << text::join(h.words, " ") << '\t' << h.tf << '\t' << h.doc_id << '\t' << h.meta.category << '\t'
                   << provenance_code(h.meta.provenance) << '\t' << h.meta.url.value_or("-") << '\n';

    } else if (name == "index-overlap") {
      require_file(index_path, "index");
      std::vector<std::uint64_t> fs_;
      for (const auto& s : text::split(thresholds, ',')) fs_.push_back(std::stoull(s));
      auto idx = load_index(index_path);
      auto texts = read_text_lines(eval_path);
      Sink sink(g.out);
      const auto kk = std::to_string(idx.k());
      sink.get() << "dataset,N_short%";
      for (auto f : fs_) sink.get() << ",O_" << f << '^' << kk;
      sink.get() << '\n' << fs::path(eval_path).filename().string();
      bool first = true;
      for (auto f : fs_) {
        auto r = overlap(texts, idx, f, count_types ? OverlapCounting::types : OverlapCounting::occurrences);
        if (first) sink.get() << ',' << text::fixed(r.short_percent, 2);
        first = false;
        sink.get() << ',' << text::fixed(r.overlap_percent, 2);
      }
      sink.get() << '\n';

    } else if (name == "finetune") {
      require_out(g);
      auto spec = find_task(task_name);
      require_file(data_path, "training data");
      TrainingConfig tc;
      if (!train_config_path.empty()) {
        require_file(train_config_path, "training config");
        tc = load_training_config(train_config_path);
      }
      if (epochs_opt) tc.epochs = *epochs_opt;
      if (g.seed) tc.seed = *g.seed;
      tc.validate();
      auto m = load_model_dir(model_dir);
      auto data = load_task_data(data_path);
      Vocab v = m.vocab;
      fs::create_directories(g.out);
      std::ofstream log(fs::path(g.out) / "train_log.csv", std::ios::binary);
      log << "epoch,mean_loss\n";
      finetune(m.ck, v, spec, data, tc, g.jobs, [&](const EpochReport& r) {
        save_model_dir(fs::path(g.out) / epoch_dir_name(r.epoch), r.checkpoint, v);
        log << r.epoch << ',' << text::fixed(r.mean_loss) << '\n';
        std::cout << "epoch " << r.epoch << " loss " << text::fixed(r.mean_loss) << '\n';
      });

    } else if (name == "eval-task") {
      auto spec = find_task(task_name);
      require_file(data_path, "test data");
      if (!baseline && model_dir.empty()) throw std::invalid_argument("--model is required unless --baseline is set");
      auto data = load_task_data(data_path);
      TaskEvaluation ev;
      if (baseline) {
        ev = evaluate_baseline(spec, data);
        epoch_label = "base";
      } else {
        auto m = load_model_dir(model_dir);
        ev = evaluate_task(m.ck, m.vocab, spec, data, g.jobs);
      }
      Sink sink(g.out);
      sink.get() << kTaskCsvHeader << '\n';
      write_task_rows(sink.get(), spec, epoch_label, ev);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}
