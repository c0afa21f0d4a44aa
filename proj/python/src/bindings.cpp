#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "poemform/corpus.hpp"
#include "poemform/errors.hpp"
#include "poemform/evaluator.hpp"
#include "poemform/form_registry.hpp"
#include "poemform/generator.hpp"
#include "poemform/model.hpp"
#include "poemform/trainer.hpp"
#include "poemform/utf8.hpp"

namespace py = pybind11;
using namespace poemform;

namespace {

py::dict diff_to_dict(const FormDiff& d) {
  py::dict out;
  out["slot"] = d.slot;
  out["line"] = d.line;
  out["expected"] = d.expected;
  out["observed"] = d.observed;
  out["message"] = d.message;
  return out;
}

py::dict check_to_dict(const FormCheckResult& r) {
  py::dict out;
  out["verdict"] = r.verdict;
  out["expected_lines"] = r.expected.line_lengths();
  out["observed_lines"] = r.observed_lines;
  out["expected_stanza_break"] = r.expected.stanza_break();
  out["observed_stanza_break"] = r.observed_stanza_break;
  out["diff"] = r.diff ? py::object(diff_to_dict(*r.diff)) : py::none();
  return out;
}

}  // namespace

PYBIND11_MODULE(_poemform, m) {
  m.doc() = "Form-aware poem generation: registry, corpus, model, generation and evaluation";

  static py::exception<Error> error(m, "Error");
  static py::exception<ValidationError> validation_error(m, "ValidationError", error.ptr());
  static py::exception<RuntimeFailure> runtime_failure(m, "RuntimeFailure", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ValidationError& e) {
      PyErr_SetString(validation_error.ptr(), e.what());
    } catch (const RuntimeFailure& e) {
      PyErr_SetString(runtime_failure.ptr(), e.what());
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), e.what());
    }
  });

  py::enum_<FormCategory>(m, "FormCategory").value("SHI", FormCategory::kShi).value("CI", FormCategory::kCi);

  py::class_<FormSpec>(m, "FormSpec")
      .def(py::init<std::string, FormCategory, std::vector<int>, std::optional<int>>(), py::arg("name"),
           py::arg("category"), py::arg("line_lengths"), py::arg("stanza_break") = std::nullopt)
      .def_property_readonly("name", &FormSpec::name)
      .def_property_readonly("category", &FormSpec::category)
      .def_property_readonly("line_lengths", &FormSpec::line_lengths)
      .def_property_readonly("stanza_break", &FormSpec::stanza_break)
      .def_property_readonly("line_count", &FormSpec::line_count)
      .def_property_readonly("body_length", &FormSpec::body_length)
      .def(py::self == py::self)
      .def("__repr__", [](const FormSpec& f) {
        return "<FormSpec " + f.name() + ", " + std::to_string(f.line_count()) + " lines>";
      });

  py::class_<FormRegistry>(m, "FormRegistry")
      .def(py::init<>())
      .def("add", &FormRegistry::add)
      .def("at", &FormRegistry::at, py::return_value_policy::copy)
      .def("__contains__", &FormRegistry::contains)
      .def("__len__", &FormRegistry::size)
      .def("names", &FormRegistry::names)
      .def("specs", &FormRegistry::specs)
      .def("to_jsonl", [](const FormRegistry& r) { return format_registry(r); })
      .def("save", [](const FormRegistry& r, const std::filesystem::path& p) { save_registry(r, p); });
  m.def("load_registry", &load_registry, py::arg("path"));
  m.def("parse_registry", &parse_registry, py::arg("text"), py::arg("source") = "<memory>");

  py::class_<Sample>(m, "Sample")
      .def(py::init([](std::string form, std::string title, std::vector<std::string> body,
                       std::optional<int> stanza_break) {
             return Sample{std::move(form), std::move(title), std::move(body), stanza_break};
           }),
           py::arg("form_name"), py::arg("title"), py::arg("body_lines"), py::arg("stanza_break") = std::nullopt)
      .def_readwrite("form_name", &Sample::form_name)
      .def_readwrite("title", &Sample::title)
      .def_readwrite("body_lines", &Sample::body_lines)
      .def_readwrite("stanza_break", &Sample::stanza_break)
      .def("validate", &Sample::validate)
      .def("line_lengths", &Sample::line_lengths)
      .def(py::self == py::self)
      .def("__repr__", [](const Sample& s) { return "<Sample " + serialize_unchecked(s, true) + ">"; });

  m.def("normalize_punctuation", [](std::string_view raw) { return normalize_punctuation(raw); }, py::arg("raw_body"));
  m.def("serialize", &serialize, py::arg("sample"), py::arg("registry"), py::arg("include_stanza_label") = true);
  m.def("serialize_unchecked", &serialize_unchecked, py::arg("sample"), py::arg("include_stanza_label") = true);
  m.def("parse", &parse, py::arg("serialized"));
  m.def("load_raw_corpus", [](const std::filesystem::path& p) { return load_raw_corpus(p); }, py::arg("path"));
  m.def("parse_raw_corpus", [](std::string_view text) { return parse_raw_corpus(text); }, py::arg("text"));

  py::class_<Vocabulary>(m, "Vocabulary")
      .def_static("build", [](const std::vector<Sample>& s, int min_freq) { return Vocabulary::build(s, min_freq); },
                  py::arg("samples"), py::arg("min_frequency") = 1)
      .def_static("load", &Vocabulary::load)
      .def("save", &Vocabulary::save)
      .def("__len__", &Vocabulary::size)
      .def_property_readonly("hash", &Vocabulary::hash)
      .def_property_readonly("min_frequency", &Vocabulary::min_frequency)
      .def("token_text", &Vocabulary::token_text)
      .def("id_of", [](const Vocabulary& v, const std::string& ch) {
        const auto cps = utf8::decode(ch);
        if (cps.size() != 1) throw ValidationError("id_of expects exactly one character");
        return v.id_of(cps.front());
      })
      .def("encode", [](const Vocabulary& v, const Sample& s, bool label) { return encode(s, v, label); },
           py::arg("sample"), py::arg("include_stanza_label") = true)
      .def("encode_serialized", [](const Vocabulary& v, std::string_view text) { return encode_serialized(text, v); })
      .def("decode", [](const Vocabulary& v, const std::vector<TokenId>& ids) { return decode(ids, v); });
  m.attr("PAD") = Vocabulary::kPad;
  m.attr("UNK") = Vocabulary::kUnk;
  m.attr("CLS") = Vocabulary::kCls;
  m.attr("EOS") = Vocabulary::kEos;

  m.def("coverage", [](const std::vector<Sample>& samples, double target) {
    const auto report = coverage_report(samples);
    py::dict out;
    out["counts"] = report.counts;
    out["cumulative"] = report.cumulative;
    out["total"] = report.total;
    out["k"] = report.rank_for(target);
    return out;
  }, py::arg("samples"), py::arg("target") = 0.8);

  py::enum_<lm::LossMode>(m, "LossMode").value("BASIC", lm::LossMode::kBasic).value("ENHANCED", lm::LossMode::kEnhanced);

  m.def("ce_loss", [](const std::vector<double>& logits, TokenId target) {
    return lm::ce_loss<double>(logits, target);
  }, py::arg("logits"), py::arg("target"));
  m.def("weighted_loss", [](const std::vector<double>& logits, TokenId target, lm::LossMode mode) {
    return lm::weighted_loss<double>(logits, target, lm::weights_for(mode, logits.size()));
  }, py::arg("logits"), py::arg("target"), py::arg("mode"));

  py::class_<lm::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("layers", &lm::ModelConfig::layers)
      .def_readwrite("heads", &lm::ModelConfig::heads)
      .def_readwrite("embed_dim", &lm::ModelConfig::embed_dim)
      .def_readwrite("ff_dim", &lm::ModelConfig::ff_dim)
      .def_readwrite("vocab_size", &lm::ModelConfig::vocab_size)
      .def_readwrite("max_seq_len", &lm::ModelConfig::max_seq_len)
      .def_readwrite("dropout_rate", &lm::ModelConfig::dropout_rate)
      .def_readwrite("tie_embeddings", &lm::ModelConfig::tie_embeddings)
      .def("validate", &lm::ModelConfig::validate)
      .def("to_json", &lm::ModelConfig::to_json);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("mode", &TrainConfig::mode)
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("grad_clip_norm", &TrainConfig::grad_clip_norm)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("report_every", &TrainConfig::report_every)
      .def("validate", &TrainConfig::validate);

  py::class_<lm::Checkpoint>(m, "Checkpoint")
      .def_readonly("config", &lm::Checkpoint::config)
      .def_readonly("vocab_hash", &lm::Checkpoint::vocab_hash)
      .def_readonly("step", &lm::Checkpoint::step)
      .def_property_readonly("parameter_count", [](const lm::Checkpoint& c) { return c.params.size(); })
      .def("save", [](const lm::Checkpoint& c, const std::filesystem::path& p) { lm::save_checkpoint(p, c); })
      .def_static("load", &lm::load_checkpoint)
      .def("logits", [](const lm::Checkpoint& c, const std::vector<TokenId>& ids) {
        const auto x = lm::forward(c.params, std::span<const TokenId>(ids));
        std::vector<std::vector<float>> rows(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index r = 0; r < x.rows(); ++r) rows[r].assign(x.row(r).data(), x.row(r).data() + x.cols());
        return rows;
      }, py::arg("ids"));
  m.def("initial_checkpoint", &initial_checkpoint, py::arg("config"), py::arg("vocab_hash"), py::arg("seed") = 0);

  m.def("train", [](const lm::Checkpoint& start, const std::vector<Sample>& samples, const Vocabulary& vocab,
                    const TrainConfig& config, bool include_stanza_label) {
    const auto stream = encode_corpus(samples, vocab, include_stanza_label);
    TrainResult result = [&] {
      py::gil_scoped_release release;
      return train(start, stream, vocab.hash(), config);
    }();
    std::vector<std::pair<int, double>> losses;
    for (const auto& row : result.report.rows) losses.emplace_back(row.step, row.loss);
    return py::make_tuple(std::move(result.final), losses);
  }, py::arg("start"), py::arg("samples"), py::arg("vocab"), py::arg("config"),
     py::arg("include_stanza_label") = true,
     "Trains from `start`; returns (checkpoint, [(step, mean loss)]).");

  py::class_<GenerationResult>(m, "GenerationResult")
      .def_readonly("form_name", &GenerationResult::form_name)
      .def_readonly("title", &GenerationResult::title)
      .def_readonly("raw", &GenerationResult::raw)
      .def_readonly("text", &GenerationResult::text)
      .def_readonly("terminated", &GenerationResult::terminated)
      .def_readonly("parsed", &GenerationResult::parsed)
      .def_readonly("parse_error", &GenerationResult::parse_error)
      .def_property_readonly("parse_ok", &GenerationResult::parse_ok)
      .def("to_json", [](const GenerationResult& r) { return to_json_line(r); });

  m.def("generate", [](const lm::Checkpoint& ckpt, const Vocabulary& vocab, const std::string& form,
                       const std::string& title, int count, int top_k, std::uint64_t seed,
                       std::optional<int> max_new_tokens) {
    if (ckpt.vocab_hash != vocab.hash()) throw ValidationError("vocabulary does not match the checkpoint");
    GenerationParams gen;
    gen.count = count;
    gen.top_k = top_k;
    gen.seed = seed;
    const auto prompt_len = static_cast<int>(build_prompt(form, title, vocab).size());
    gen.max_new_tokens = max_new_tokens.value_or(ckpt.config.max_seq_len - prompt_len);
    py::gil_scoped_release release;
    return generate_many(ckpt.params, vocab, form, title, gen);
  }, py::arg("checkpoint"), py::arg("vocab"), py::arg("form"), py::arg("title"), py::arg("count") = 1,
     py::arg("top_k") = 15, py::arg("seed") = 0, py::arg("max_new_tokens") = std::nullopt);
  m.def("read_generations", &read_generation_results, py::arg("path"));
  m.def("write_generations", [](const std::filesystem::path& p, const std::vector<GenerationResult>& r) {
    write_generation_results(p, r);
  }, py::arg("path"), py::arg("results"));

  m.def("check_form", [](const Sample& s, const FormSpec& spec, bool ignore_break) {
    return check_to_dict(check_form(s, spec, CheckOptions{ignore_break}));
  }, py::arg("sample"), py::arg("spec"), py::arg("ignore_stanza_break") = false);

  m.def("correct_rate", [](const std::vector<GenerationResult>& results, const FormRegistry& registry,
                           bool ignore_break) {
    const auto report = correct_rate(results, registry, "", CheckOptions{ignore_break});
    py::list rows;
    for (const auto& r : report.rows) {
      py::dict row;
      row["form"] = r.form;
      row["length_of_body"] = r.body_length;
      row["n_generated"] = r.generated;
      row["n_correct"] = r.correct;
      row["rate"] = r.rate;
      rows.append(row);
    }
    return rows;
  }, py::arg("results"), py::arg("registry"), py::arg("ignore_stanza_break") = false);
}
